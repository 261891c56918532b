"""Multi-view factor analysis with variational-autoencoder views."""

from .dataset import Dataset, ViewData
from .errors import (FavaeError, FormatError, NumericalError, StructuralError, TrainingError)
from .fa_core import Hyperparams
from .model import FAVAE
from .trainer import TrainConfig, TrainTrace, ViewSettings, build_model, resume, train
from .views import ViewKind

__all__ = [
    "Dataset", "ViewData", "ViewKind", "FAVAE", "Hyperparams", "TrainConfig", "TrainTrace",
    "ViewSettings", "build_model", "train", "resume", "FavaeError", "FormatError",
    "NumericalError", "StructuralError", "TrainingError",
]

__version__ = "0.1.0"
