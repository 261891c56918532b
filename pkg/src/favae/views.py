"""Per-view local models feeding the factor-analysis layer.

Every view exposes a pseudo-observation matrix (its data, its VAE codes or
its Gaussianized labels) together with the precision those entries carry,
and owns the posteriors q(W), q(alpha) and q(tau) of its projection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from . import fa_core
from .errors import NumericalError, StructuralError
from .fa_core import (ArdPosterior, GlobalLatent, Hyperparams, LinearTerm, NoisePosterior,
                      ProjectionPosterior)
from .neural import AdamState, FaPrior, VaeNet, encode, reparam_sample, run_epoch


class ViewKind(str, enum.Enum):
    REAL = "real"
    MULTILABEL = "multilabel"
    VAE = "vae"
    FROZEN = "frozen_latent"


@dataclass
class PseudoObservation:
    values: np.ndarray
    second_moment_diag: Optional[np.ndarray] = None


def _check_finite(data, what):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise StructuralError(f"{what} must be a 2-D matrix, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return data


def _sample_rows(name, mask, n) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise StructuralError(f"view {name!r}: mask shape {mask.shape}, expected {(n,)}")
    return mask.astype(bool)


def real_view_pseudo_obs(data) -> PseudoObservation:
    """Real-valued views are their own pseudo-observation."""
    return PseudoObservation(_check_finite(data, "real view data"))


def jj_lambda(xi):
    """Jaakkola-Jordan curvature tanh(xi/2) / (4 xi), equal to 1/8 at xi = 0."""
    xi = np.asarray(xi, dtype=float)
    safe = np.where(np.abs(xi) < 1e-6, 1.0, xi)
    series = 0.125 - xi ** 2 / 96.0
    return np.where(np.abs(xi) < 1e-6, series, np.tanh(safe / 2.0) / (4.0 * safe))


def multilabel_bound(z, label, xi):
    """Quadratic lower bound on log sigmoid((2y - 1) z), tight at xi = |z|."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise StructuralError("xi must be non-negative")
    z = np.asarray(z, dtype=float)
    s = 2.0 * np.asarray(label, dtype=float) - 1.0
    return log_expit(xi) + (s * z - xi) / 2.0 - jj_lambda(xi) * (z ** 2 - xi ** 2)


def vae_view_pseudo_obs(net: VaeNet, data, mode: str = "sample", seed=None) -> PseudoObservation:
    """Encoder samples (``mode='sample'``) or means with variances (``mode='mean'``)."""
    mu, logvar = encode(net, np.atleast_2d(np.asarray(data, dtype=float)))
    if mode == "mean":
        return PseudoObservation(mu, np.exp(logvar))
    if mode == "sample":
        return PseudoObservation(reparam_sample(mu, logvar, seed))
    raise StructuralError(f"unknown pseudo-observation mode {mode!r}")


# ---------------------------------------------------------------------------
# View objects
# ---------------------------------------------------------------------------

class View:
    """Base view with scalar noise precision and a per-sample observation mask."""

    kind: ViewKind

    def __init__(self, name: str, x: np.ndarray, mask=None):
        self.name = name
        self.x = np.asarray(x, dtype=float)
        n = self.x.shape[0]
        if mask is None:
            mask = np.ones(n, dtype=bool)
        mask = np.asarray(mask)
        if mask.shape != (n,):
            raise StructuralError(f"view {name!r}: mask shape {mask.shape}, expected {(n,)}")
        self.mask = mask.astype(bool)
        self.x_var: Optional[np.ndarray] = None
        self.entry_mask: Optional[np.ndarray] = None
        self.w: Optional[ProjectionPosterior] = None
        self.alpha: Optional[ArdPosterior] = None
        self.tau: Optional[NoisePosterior] = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def init_posteriors(self, hp: Hyperparams, rng):
        k = hp.k_c
        self.w = ProjectionPosterior(0.1 * rng.standard_normal((self.dim, k)), np.eye(k))
        self.alpha = ArdPosterior(hp.a_alpha, np.full(k, hp.b_alpha))
        self.tau = NoisePosterior(hp.a_tau, hp.b_tau)

    # -- pieces used by the coordinate ascent ------------------------------
    def precision(self):
        if self.entry_mask is None:
            return self.tau.mean
        return self.tau.mean * self.entry_mask

    def data_for_fa(self):
        if self.entry_mask is None:
            return self.x
        return np.where(self.entry_mask > 0, self.x, 0.0)

    def linear_term(self) -> LinearTerm:
        return LinearTerm(self.data_for_fa(), self.w, self.precision(), self.mask, self.name)

    def update_w(self, z: GlobalLatent, hp: Hyperparams):
        self.w = fa_core.update_q_w(self.data_for_fa(), z, self.alpha, self.precision(), hp.gamma_mean,
                                    self.mask, self.name)

    def update_alpha(self, hp: Hyperparams):
        self.alpha = fa_core.update_q_alpha(self.w, hp)

    def update_tau(self, z: GlobalLatent, hp: Hyperparams):
        self.tau = fa_core.update_q_tau(self.data_for_fa(), z, self.w, hp, self.mask, self.x_var,
                                        self.entry_mask, self.name)

    def expected_loglik(self, z: GlobalLatent) -> float:
        return fa_core.gaussian_expected_loglik(self.data_for_fa(), z, self.w, self.tau, self.mask,
                                                self.x_var, self.entry_mask)

    def refresh(self, z: GlobalLatent, rng):
        """Recompute the pseudo-observations (no-op for fixed data)."""

    def select_factors(self, keep):
        self.w = self.w.select(keep)
        self.alpha = self.alpha.select(keep)

    def pseudo_obs(self) -> PseudoObservation:
        return PseudoObservation(self.x, self.x_var)


class RealView(View):
    """Real-valued data modeled linearly; optional entry-level missingness."""

    kind = ViewKind.REAL

    def __init__(self, name: str, data, mask=None, entry_mask=None):
        data = np.asarray(data, dtype=float)
        rows = _sample_rows(name, mask, data.shape[0])
        if entry_mask is not None:
            entry_mask = np.asarray(entry_mask, dtype=float)
            if entry_mask.shape != data.shape:
                raise StructuralError(f"view {name!r}: entry mask shape {entry_mask.shape} != data {data.shape}")
            observed = (entry_mask > 0) & rows[:, None]
        else:
            observed = np.broadcast_to(rows[:, None], data.shape)
        if not np.all(np.isfinite(data[observed])):
            raise NumericalError(f"view {name!r}: observed data contains NaN or Inf")
        super().__init__(name, np.where(observed, data, 0.0), mask)
        self.entry_mask = entry_mask


class FrozenLatentView(RealView):
    """Fixed codes of a pre-trained model; ``net`` (optional) decodes them."""

    kind = ViewKind.FROZEN

    def __init__(self, name: str, codes, mask=None, net: Optional[VaeNet] = None, data=None):
        super().__init__(name, codes, mask)
        self.x.setflags(write=False)
        self.net = net
        self.data = None if data is None else np.asarray(data, dtype=float)


class MultilabelView(View):
    """Binary labels through a logistic link, Gaussianized by the Jaakkola-Jordan bound.

    Each observed entry acts as a Gaussian pseudo-observation
    ``(y - 1/2) / (2 lambda(xi))`` with precision ``2 lambda(xi)``; the view
    carries no learned noise precision.
    """

    kind = ViewKind.MULTILABEL

    def __init__(self, name: str, labels, mask=None, entry_mask=None):
        labels = np.asarray(labels, dtype=float)
        if labels.ndim != 2:
            raise StructuralError(f"view {name!r}: labels must be a matrix")
        if entry_mask is None:
            entry_mask = np.ones_like(labels)
        entry_mask = np.asarray(entry_mask, dtype=float)
        if entry_mask.shape != labels.shape:
            raise StructuralError(f"view {name!r}: entry mask shape {entry_mask.shape} != labels {labels.shape}")
        rows = _sample_rows(name, mask, labels.shape[0])
        observed = (entry_mask > 0) & rows[:, None]
        if not np.all(np.isin(labels[observed], (0.0, 1.0))):
            raise StructuralError(f"view {name!r}: labels must be 0 or 1")
        self.labels = np.where(observed, labels, 0.0)
        self.xi = np.zeros_like(labels)
        super().__init__(name, self._gaussianized(), mask)
        self.entry_mask = entry_mask

    def _gaussianized(self):
        return (self.labels - 0.5) / (2.0 * jj_lambda(self.xi))

    def observed(self) -> np.ndarray:
        return (self.entry_mask > 0) & self.mask[:, None]

    def init_posteriors(self, hp: Hyperparams, rng):
        super().init_posteriors(hp, rng)
        self.tau = None

    def precision(self):
        return 2.0 * jj_lambda(self.xi) * self.entry_mask

    def data_for_fa(self):
        return self.x

    def update_tau(self, z, hp):
        """Multilabel views have no learned noise precision."""

    def expected_loglik(self, z: GlobalLatent) -> float:
        obs = self.observed()
        mean = z.mean @ self.w.mean.T
        sq = fa_core.expected_sq_predictor(z, self.w)
        lam = jj_lambda(self.xi)
        terms = log_expit(self.xi) + (self.labels - 0.5) * mean - self.xi / 2.0 - lam * (sq - self.xi ** 2)
        return float(np.sum(terms[obs]))

    def refresh(self, z: GlobalLatent, rng=None):
        update_multilabel(self, z, self.w)

    def probabilities(self, z_mean: np.ndarray) -> np.ndarray:
        return expit(z_mean @ self.w.mean.T)


def update_multilabel(view: MultilabelView, z: GlobalLatent, w: ProjectionPosterior) -> PseudoObservation:
    """Set xi to the root second moment of the linear predictor at observed entries."""
    obs = view.observed()
    if obs.any():
        sq = fa_core.expected_sq_predictor(z, w)
        view.xi = np.where(obs, np.sqrt(np.maximum(sq, 0.0)), view.xi)
        view.x = view._gaussianized()
    return PseudoObservation(view.x)


class VaeView(View):
    """View whose pseudo-observations are the codes of a VAE encoder."""

    kind = ViewKind.VAE

    def __init__(self, name: str, data, net: VaeNet, mask=None, frozen: bool = False,
                 learning_rate: float = 1e-3, prior_mode: str = "sample", pseudo_obs_mode: str = "sample"):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[1] != net.input_dim:
            raise StructuralError(f"view {name!r}: data {data.shape} does not fit network input {net.input_dim}")
        rows = _sample_rows(name, mask, data.shape[0])
        if not np.all(np.isfinite(data[rows])):
            raise NumericalError(f"view {name!r}: observed data contains NaN or Inf")
        self.data = np.where(rows[:, None], data, 0.0)
        self.net = net
        self.frozen = frozen
        self.prior_mode = prior_mode
        self.pseudo_obs_mode = pseudo_obs_mode
        self.adam = AdamState(learning_rate=learning_rate)
        super().__init__(name, np.zeros((data.shape[0], net.latent_dim)), mask)

    def set_pseudo_obs(self, po: PseudoObservation):
        x = np.zeros((self.n, self.net.latent_dim))
        x[self.mask] = po.values
        self.x = x
        if po.second_moment_diag is None:
            self.x_var = None
        else:
            var = np.zeros_like(x)
            var[self.mask] = po.second_moment_diag
            self.x_var = var

    def refresh(self, z: GlobalLatent, rng):
        if not self.mask.any():
            return
        seed = None if self.pseudo_obs_mode == "mean" else rng
        self.set_pseudo_obs(vae_view_pseudo_obs(self.net, self.data[self.mask], self.pseudo_obs_mode, seed))

    def fa_prior(self, z: GlobalLatent, rng) -> FaPrior:
        """Prior over the codes of the observed samples implied by the current posteriors."""
        rows = self.mask
        if self.prior_mode == "mean":
            return FaPrior(z.mean[rows] @ self.w.mean.T, self.tau.mean)
        if self.prior_mode != "sample":
            raise StructuralError(f"unknown prior mode {self.prior_mode!r}")
        k = z.k
        zc = np.linalg.cholesky(z.covs + 1e-12 * np.eye(k))
        zs = z.mean + np.einsum("nkl,nl->nk", zc[z.group], rng.standard_normal((z.n, k)))
        wc = np.linalg.cholesky(self.w.row_covs() + 1e-12 * np.eye(k))
        ws = self.w.mean + np.einsum("dkl,dl->dk", wc, rng.standard_normal(self.w.mean.shape))
        tau = rng.gamma(self.tau.a, 1.0 / self.tau.b)
        return FaPrior(zs[rows] @ ws.T, float(max(tau, 1e-300)))

    def train_epochs(self, z: GlobalLatent, epochs: int, batch_size: int, rng):
        """Maximize the view's ELBO under the current factor-analysis prior."""
        if self.frozen or not self.mask.any():
            return []
        prior = self.fa_prior(z, rng)
        data = self.data[self.mask]
        stats = []
        for _ in range(epochs):
            stats.append(run_epoch(self.net, data,
                                   lambda idx: FaPrior(prior.mean[idx], prior.tau),
                                   self.adam, batch_size, rng))
        return stats
