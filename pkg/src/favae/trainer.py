"""Outer coordinate-ascent loop tying the factor-analysis layer to the views.

Each outer iteration updates q(Z) once, then for every view in order:
q(W), the VAE epochs (trainable VAE views), the pseudo-observation refresh,
q(alpha) and q(tau).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .dataset import Dataset
from .errors import FavaeError, StructuralError, TrainingError
from .fa_core import Hyperparams, rotate_latent
from .model import FAVAE
from .neural import VaeNet
from .views import FrozenLatentView, MultilabelView, RealView, VaeView, View, ViewKind

PRIOR_MODES = ("sample", "mean")


@dataclass
class ViewSettings:
    """Per-view options; the network fields only matter when a VAE is built."""

    frozen: bool = False
    beta: float = 1.0
    learning_rate: float = 1e-3
    prior_mode: str = "sample"
    pseudo_obs_mode: str = "sample"
    latent_dim: int = 8
    hidden: Tuple[int, ...] = (64,)
    activation: str = "tanh"
    decoder_sigma: float = 0.1

    def __post_init__(self):
        if self.prior_mode not in PRIOR_MODES:
            raise StructuralError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.pseudo_obs_mode not in PRIOR_MODES:
            raise StructuralError(f"pseudo_obs_mode must be one of {PRIOR_MODES}")
        if self.beta < 1:
            raise StructuralError("beta must be >= 1")
        if not self.learning_rate > 0:
            raise StructuralError("learning_rate must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class TrainConfig:
    max_outer_iters: int = 50
    inner_epochs: int = 10
    batch_size: int = 64
    rel_tol: float = 1e-6
    seed: int = 0
    patience: int = 3
    rotate: bool = True
    per_view: Dict[str, ViewSettings] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_outer_iters < 1 or self.inner_epochs < 1 or self.batch_size < 1:
            raise StructuralError("max_outer_iters, inner_epochs and batch_size must be >= 1")
        if not self.rel_tol > 0:
            raise StructuralError("rel_tol must be positive")
        self.per_view = {k: v if isinstance(v, ViewSettings) else ViewSettings(**v)
                         for k, v in self.per_view.items()}

    def to_dict(self) -> dict:
        d = asdict(self)
        for v in d["per_view"].values():
            v["hidden"] = list(v["hidden"])
        return d


@dataclass
class TraceRecord:
    iteration: int
    fa_elbo: float
    vae_elbo: Dict[str, float] = field(default_factory=dict)
    gll: Dict[str, float] = field(default_factory=dict)
    kl: Dict[str, float] = field(default_factory=dict)
    epoch_gll: Dict[str, List[float]] = field(default_factory=dict)
    epoch_kl: Dict[str, List[float]] = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)


FIELD_ORDER = [f.name for f in fields(TraceRecord)]


@dataclass
class TrainTrace:
    records: List[TraceRecord] = field(default_factory=list)

    def to_lines(self) -> List[str]:
        return [json.dumps({k: getattr(r, k) for k in FIELD_ORDER}) for r in self.records]

    @classmethod
    def from_lines(cls, lines) -> "TrainTrace":
        return cls([TraceRecord(**json.loads(line)) for line in lines if line.strip()])

    @property
    def fa_elbo(self) -> np.ndarray:
        return np.array([r.fa_elbo for r in self.records])

    def epoch_series(self, view: str, what: str = "gll") -> np.ndarray:
        """Per-epoch values of one VAE view concatenated over outer iterations."""
        attr = "epoch_gll" if what == "gll" else "epoch_kl"
        out = []
        for r in self.records:
            out.extend(getattr(r, attr).get(view, []))
        return np.array(out)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def make_view(data, settings: Optional[ViewSettings] = None, net: Optional[VaeNet] = None,
              seed: int = 0) -> View:
    """Build the view object matching a ``ViewData`` entry."""
    s = settings or ViewSettings()
    if data.kind is ViewKind.REAL:
        return RealView(data.name, data.values, data.sample_mask, data.entry_mask)
    if data.kind is ViewKind.MULTILABEL:
        return MultilabelView(data.name, data.values, data.sample_mask, data.entry_mask)
    if data.kind is ViewKind.FROZEN:
        return FrozenLatentView(data.name, data.values, data.sample_mask, net=net)
    if data.entry_mask is not None:
        raise StructuralError(f"VAE view {data.name!r} accepts only per-sample masks")
    if net is None:
        net = VaeNet.create(data.values.shape[1], s.latent_dim, s.hidden, s.activation, s.beta,
                            s.decoder_sigma, seed=seed)
    view = VaeView(data.name, data.values, net, data.sample_mask, s.frozen, s.learning_rate,
                   s.prior_mode, s.pseudo_obs_mode)
    return view


def build_model(dataset: Dataset, hp: Hyperparams, settings: Optional[Dict[str, ViewSettings]] = None,
                seed: int = 0, nets: Optional[Dict[str, VaeNet]] = None) -> FAVAE:
    settings = settings or {}
    nets = nets or {}
    model = FAVAE(hp, dataset.n, seed)
    for i, vd in enumerate(dataset.views):
        model.add_view(make_view(vd, settings.get(vd.name), nets.get(vd.name), seed=seed + 1 + i))
    model.data_hash = dataset.content_hash()
    return model


def attach_view(model: FAVAE, view: View) -> FAVAE:
    """Add a view to a (possibly trained) model without touching existing posteriors."""
    model.add_view(view)
    model.converged = False
    return model


def _apply_settings(model: FAVAE, per_view: Dict[str, ViewSettings]):
    for name, s in per_view.items():
        view = model[name]
        if isinstance(view, VaeView):
            view.frozen = s.frozen
            view.net.beta = s.beta
            view.adam.learning_rate = s.learning_rate
            view.prior_mode = s.prior_mode
            view.pseudo_obs_mode = s.pseudo_obs_mode


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _stalled(trace: TrainTrace, rel_tol: float, patience: int) -> bool:
    e = trace.fa_elbo
    if e.size <= patience:
        return False
    tail = e[-(patience + 1):]
    rel = np.abs(np.diff(tail)) / np.maximum(np.abs(tail[1:]), 1e-300)
    return bool(np.all(rel < rel_tol))


def train(model: FAVAE, config: TrainConfig, trace: Optional[TrainTrace] = None,
          callback: Optional[Callable] = None, checkpoint_dir=None) -> Tuple[FAVAE, TrainTrace]:
    """Run up to ``config.max_outer_iters`` outer iterations.

    ``callback(step, view_name, model)`` is invoked after every individual
    update; ``step`` is one of ``q_z``, ``q_w``, ``vae``, ``refresh``,
    ``q_alpha``, ``q_tau`` and, when ``config.rotate`` is set, a final
    ``rotate`` that re-aligns the latent axes (see
    :func:`favae.fa_core.rotate_latent`).  Randomness in iteration ``i`` comes from a
    generator seeded with ``(config.seed, i)``, so interrupted and resumed
    runs reproduce uninterrupted ones.
    """
    trace = trace if trace is not None else TrainTrace()
    _apply_settings(model, config.per_view)
    notify = callback or (lambda *args: None)
    for _ in range(config.max_outer_iters):
        if model.converged:
            break
        start = time.perf_counter()
        rng = np.random.default_rng([config.seed, model.iteration])
        record = TraceRecord(model.iteration, 0.0)
        current = None
        try:
            model.update_q_z()
            notify("q_z", None, model)
            for name, view in model.views.items():
                current = name
                view.update_w(model.z, model.hp)
                notify("q_w", name, model)
                trainable = isinstance(view, VaeView) and not view.frozen
                if trainable:
                    stats = view.train_epochs(model.z, config.inner_epochs, config.batch_size, rng)
                    notify("vae", name, model)
                    if stats:
                        record.vae_elbo[name] = stats[-1].elbo
                        record.gll[name] = stats[-1].gll
                        record.kl[name] = stats[-1].kl
                        record.epoch_gll[name] = [s.gll for s in stats]
                        record.epoch_kl[name] = [s.kl for s in stats]
                if trainable or isinstance(view, MultilabelView):
                    view.refresh(model.z, rng)
                    notify("refresh", name, model)
                view.update_alpha(model.hp)
                notify("q_alpha", name, model)
                if view.tau is not None:
                    view.update_tau(model.z, model.hp)
                    notify("q_tau", name, model)
            current = None
            if config.rotate:
                rotate_latent(model)
                notify("rotate", None, model)
            record.fa_elbo = model.elbo()
        except FavaeError as exc:
            if checkpoint_dir is not None:
                from .data_io import save_checkpoint
                save_checkpoint(model, trace, checkpoint_dir, config)
            raise TrainingError(f"iteration {model.iteration}, view {current!r}: {exc}",
                                model.iteration, current) from exc
        record.wall_time = time.perf_counter() - start
        trace.records.append(record)
        model.iteration += 1
        if _stalled(trace, config.rel_tol, config.patience):
            model.converged = True
    return model, trace


def resume(checkpoint_dir, dataset: Dataset, config: TrainConfig,
           hp: Optional[Hyperparams] = None) -> Tuple[FAVAE, TrainTrace]:
    """Reload a checkpoint (checking it belongs to ``dataset``) and keep training.

    When ``hp`` is given its latent dimension must match the checkpoint.
    """
    from .data_io import load_checkpoint
    model, trace, _ = load_checkpoint(checkpoint_dir, dataset)
    if hp is not None and hp.k_c != model.k:
        raise StructuralError(f"checkpoint has k_c={model.k}, configuration asks for {hp.k_c}")
    return train(model, config, trace)
