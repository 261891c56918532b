"""The FA-VAE model: shared latent posterior plus an ordered set of views."""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import fa_core
from .errors import StructuralError
from .fa_core import GlobalLatent, Hyperparams
from .views import View, VaeView


class FAVAE:
    """Container for the global posterior q(Z) and the per-view state.

    Views are updated in insertion order.  ``rng`` is only used to
    initialize new views; training draws from per-iteration generators.
    """

    def __init__(self, hp: Hyperparams, n: int, seed: int = 0):
        self.hp = hp
        self.n = int(n)
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.views: Dict[str, View] = {}
        self.z = GlobalLatent.from_shared(0.1 * self.rng.standard_normal((self.n, hp.k_c)), np.eye(hp.k_c))
        self.iteration = 0
        self.converged = False
        self.data_hash: Optional[str] = None
        self.inference_only = False

    @property
    def k(self) -> int:
        return self.z.k

    def add_view(self, view: View) -> View:
        if view.name in self.views:
            raise StructuralError(f"duplicate view name {view.name!r}")
        if view.n != self.n:
            raise StructuralError(f"view {view.name!r} has {view.n} samples, model has {self.n}")
        if self.hp.k_c != self.k:
            raise StructuralError("hyper-parameter k_c out of sync with the latent posterior")
        view.init_posteriors(self.hp, self.rng)
        if isinstance(view, VaeView):
            view.refresh(self.z, self.rng)
        self.views[view.name] = view
        return view

    def update_q_z(self):
        self.z = fa_core.update_q_z([v.linear_term() for v in self.views.values()], self.n, self.k)
        return self.z

    def elbo(self) -> float:
        return fa_core.fa_elbo(self.z, list(self.views.values()), self.hp)

    def prune_factors(self, threshold: Optional[float] = None) -> np.ndarray:
        return fa_core.prune_factors(self, threshold)

    def __getitem__(self, name: str) -> View:
        try:
            return self.views[name]
        except KeyError:
            raise StructuralError(f"unknown view {name!r}") from None
