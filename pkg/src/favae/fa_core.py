"""Conjugate factor-analysis layer: mean-field posteriors and their updates.

All updates follow the usual linear-Gaussian/Gamma coordinate ascent.  The
generative model for view ``m`` is ``X^(m) = Z W^(m)T + noise`` with
``W^(m)`` of shape ``(D_m, K)``.

Views enter the updates through their per-entry precision.  A scalar
precision (the mean noise precision of the view) keeps every covariance
shared across samples, grouped by the pattern of observed views.  A matrix
precision of shape ``(N, D)`` covers heteroscedastic views (multilabel
views, entry-level masks) at the cost of one covariance per sample and per
projection row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import digamma, gammaln

from .errors import NumericalError, StructuralError

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_START = 1e-10
JITTER_MAX = 1e-6

Precision = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------

def _chol_inverse(a):
    chol = np.linalg.cholesky(a)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    linv = np.linalg.solve(chol, eye)
    inv = np.swapaxes(linv, -1, -2) @ linv
    inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)
    return inv, logdet


def spd_inverse(a: np.ndarray, context: str = "matrix"):
    """Invert a symmetric positive-definite matrix (or a stack of them).

    Falls back to jitter escalation (1e-10 up to 1e-6 times the identity)
    for matrices whose Cholesky factorization fails.

    Returns
    -------
    inv, logdet : ndarray
        The inverse and the log-determinant of ``a`` (without jitter).
    """
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{context}: non-finite entries in precision matrix")
    try:
        return _chol_inverse(a)
    except np.linalg.LinAlgError:
        pass
    if a.ndim > 2:
        flat = a.reshape(-1, a.shape[-2], a.shape[-1])
        invs = np.empty_like(flat)
        logdets = np.empty(flat.shape[0])
        for i, m in enumerate(flat):
            invs[i], logdets[i] = spd_inverse(m, f"{context}[{i}]")
        return invs.reshape(a.shape), logdets.reshape(a.shape[:-2])
    eye = np.eye(a.shape[-1])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-12):
        try:
            return _chol_inverse(a + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    cond = np.linalg.cond(a)
    raise NumericalError(f"{context}: precision not positive definite (condition estimate {cond:.3e})")


def _as_precision(precision, n, d) -> Precision:
    if np.ndim(precision) == 0:
        return float(precision)
    p = np.asarray(precision, dtype=float)
    if p.shape != (n, d):
        raise StructuralError(f"per-entry precision has shape {p.shape}, expected {(n, d)}")
    return p


# ---------------------------------------------------------------------------
# Posterior containers
# ---------------------------------------------------------------------------

@dataclass
class Hyperparams:
    """Prior hyper-parameters of the factor-analysis layer."""

    k_c: int
    a_alpha: float = 1e-3
    b_alpha: float = 1e-3
    a_tau: float = 1e-3
    b_tau: float = 1e-3
    prune_threshold: float = 0.1
    gamma_mean: float = 1.0

    def __post_init__(self):
        if int(self.k_c) != self.k_c or self.k_c < 1:
            raise StructuralError(f"k_c must be a positive integer, got {self.k_c}")
        self.k_c = int(self.k_c)
        for name in ("a_alpha", "b_alpha", "a_tau", "b_tau", "gamma_mean"):
            if not getattr(self, name) > 0:
                raise StructuralError(f"{name} must be strictly positive")
        if self.prune_threshold < 0:
            raise StructuralError("prune_threshold must be non-negative")


@dataclass
class GlobalLatent:
    """Gaussian posterior over the shared latent matrix Z.

    Samples are partitioned into groups sharing one covariance.  Without
    missing data there is a single group; with missing views there is one
    group per observation pattern; heteroscedastic views give every sample
    its own group.
    """

    mean: np.ndarray
    covs: np.ndarray
    group: np.ndarray
    patterns: Optional[list] = None

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.mean.shape[1]

    @classmethod
    def from_shared(cls, mean, cov):
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.asarray(cov, dtype=float)[None].copy(), np.zeros(mean.shape[0], dtype=np.int64))

    @classmethod
    def prior(cls, n: int, k: int):
        return cls.from_shared(np.zeros((n, k)), np.eye(k))

    @property
    def cov(self) -> np.ndarray:
        """The covariance shared by every sample."""
        if self.covs.shape[0] != 1:
            raise StructuralError("covariance differs between samples; use sample_covs() or pattern_covs")
        return self.covs[0]

    @property
    def pattern_covs(self) -> dict:
        if self.patterns is None:
            return {}
        return {tuple(p): c for p, c in zip(self.patterns, self.covs)}

    def sample_covs(self) -> np.ndarray:
        return self.covs[self.group]

    def group_counts(self, rows=None) -> np.ndarray:
        g = self.group if rows is None else self.group[rows]
        return np.bincount(g, minlength=self.covs.shape[0]).astype(float)

    def second_moment(self, rows=None) -> np.ndarray:
        """<Z^T Z> summed over ``rows`` (boolean mask; all rows by default)."""
        mu = self.mean if rows is None else self.mean[rows]
        return mu.T @ mu + np.einsum("g,gkl->kl", self.group_counts(rows), self.covs)

    def entropy(self) -> float:
        _, logdets = spd_inverse(self.covs, "q(Z) covariance")
        k = self.k
        return float(0.5 * self.group_counts() @ (logdets + k * (1.0 + LOG_2PI)))

    def select(self, keep) -> "GlobalLatent":
        keep = np.asarray(keep, dtype=bool)
        return GlobalLatent(self.mean[:, keep].copy(), self.covs[:, keep][:, :, keep].copy(),
                            self.group.copy(), self.patterns)

    def copy(self) -> "GlobalLatent":
        return GlobalLatent(self.mean.copy(), self.covs.copy(), self.group.copy(),
                            None if self.patterns is None else list(self.patterns))


@dataclass
class ProjectionPosterior:
    """Gaussian posterior over the rows of a projection matrix W (D x K).

    ``cov`` is either one K x K matrix shared by all rows or a stack of
    D row covariances.
    """

    mean: np.ndarray
    cov: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.mean.shape[1]

    @property
    def shared(self) -> bool:
        return self.cov.ndim == 2

    def row_covs(self) -> np.ndarray:
        if self.shared:
            return np.broadcast_to(self.cov, (self.d, self.k, self.k))
        return self.cov

    def second_moment(self) -> np.ndarray:
        """<W^T W> = mean^T mean + sum of row covariances."""
        covsum = self.d * self.cov if self.shared else self.cov.sum(0)
        return self.mean.T @ self.mean + covsum

    def row_second_moments(self) -> np.ndarray:
        """<W_d W_d^T> for every row, shape (D, K, K)."""
        return np.einsum("dk,dl->dkl", self.mean, self.mean) + self.row_covs()

    def sq_mean(self) -> np.ndarray:
        """<W_dk^2>, shape (D, K)."""
        diag = np.diagonal(self.row_covs(), axis1=1, axis2=2)
        return self.mean ** 2 + diag

    def entropy(self) -> float:
        _, logdets = spd_inverse(self.cov, "q(W) covariance")
        k = self.k
        total = self.d * logdets if self.shared else logdets.sum()
        return float(0.5 * (total + self.d * k * (1.0 + LOG_2PI)))

    def select(self, keep) -> "ProjectionPosterior":
        keep = np.asarray(keep, dtype=bool)
        cov = self.cov[keep][:, keep] if self.shared else self.cov[:, keep][:, :, keep]
        return ProjectionPosterior(self.mean[:, keep].copy(), cov.copy())

    def copy(self) -> "ProjectionPosterior":
        return ProjectionPosterior(self.mean.copy(), self.cov.copy())


def _gamma_entropy(a, b):
    return a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)


def _gamma_expected_log_prior(a, b, a0, b0):
    return a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * (digamma(a) - np.log(b)) - b0 * a / b


@dataclass
class ArdPosterior:
    """Gamma posteriors of the per-factor ARD precisions (shared shape)."""

    a: float
    b: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.a / self.b

    @property
    def log_mean(self) -> np.ndarray:
        return digamma(self.a) - np.log(self.b)

    def select(self, keep) -> "ArdPosterior":
        return ArdPosterior(self.a, self.b[np.asarray(keep, dtype=bool)].copy())

    def copy(self) -> "ArdPosterior":
        return ArdPosterior(self.a, self.b.copy())


@dataclass
class NoisePosterior:
    """Gamma posterior of a view's noise precision."""

    a: float
    b: float

    @property
    def mean(self) -> float:
        return self.a / self.b

    @property
    def log_mean(self) -> float:
        return float(digamma(self.a) - np.log(self.b))

    def copy(self) -> "NoisePosterior":
        return NoisePosterior(self.a, self.b)


@dataclass
class LinearTerm:
    """One view's contribution to q(Z): data, projection and precision.

    ``precision`` is the mean noise precision (scalar) or a per-entry
    matrix; ``mask`` marks the samples where the view is observed.
    """

    x: np.ndarray
    w: ProjectionPosterior
    precision: Precision
    mask: Optional[np.ndarray] = None
    name: str = field(default="view")


# ---------------------------------------------------------------------------
# Coordinate-ascent updates
# ---------------------------------------------------------------------------

def _row_mask(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != (n,):
        raise StructuralError(f"sample mask has shape {mask.shape}, expected {(n,)}")
    return mask.astype(bool)


def update_q_z(terms: Sequence[LinearTerm], n: int, k: int) -> GlobalLatent:
    """Optimal q(Z) given the projection and noise posteriors of every view."""
    h = np.zeros((n, k))
    scalar_terms = []
    entry_prec = None
    for t in terms:
        x = np.asarray(t.x, dtype=float)
        if x.ndim != 2 or x.shape[0] != n or x.shape[1] != t.w.d or t.w.k != k:
            raise StructuralError(f"view {t.name!r}: data {x.shape} incompatible with N={n}, "
                                  f"W {t.w.mean.shape}, K={k}")
        rows = _row_mask(t.mask, n)
        prec = _as_precision(t.precision, n, t.w.d)
        if isinstance(prec, float):
            h[rows] += prec * (x[rows] @ t.w.mean)
            scalar_terms.append((t, rows, prec))
        else:
            p = prec * rows[:, None]
            h += (p * x) @ t.w.mean
            part = np.einsum("nd,dkl->nkl", p, t.w.row_second_moments())
            entry_prec = part if entry_prec is None else entry_prec + part

    eye = np.eye(k)
    if entry_prec is None:
        keys = np.stack([rows for _, rows, _ in scalar_terms], axis=1) if scalar_terms \
            else np.zeros((n, 0), dtype=bool)
        patterns, group = np.unique(keys, axis=0, return_inverse=True)
        group = np.asarray(group).reshape(-1).astype(np.int64)
        lam = np.empty((len(patterns), k, k))
        for g, pat in enumerate(patterns):
            lam[g] = eye
            for (t, _, tau), on in zip(scalar_terms, pat):
                if on:
                    lam[g] += tau * t.w.second_moment()
        names = [t.name for t, _, _ in scalar_terms]
        covs, _ = spd_inverse(lam, f"q(Z) precision (views {names})")
        mean = np.einsum("nk,nkl->nl", h, covs[group]) if len(patterns) > 1 else h @ covs[0]
        return GlobalLatent(mean, covs, group, [tuple(bool(v) for v in p) for p in patterns])

    lam = entry_prec + eye
    for t, rows, tau in scalar_terms:
        lam[rows] += tau * t.w.second_moment()
    covs, _ = spd_inverse(lam, "q(Z) per-sample precision")
    mean = np.einsum("nk,nkl->nl", h, covs)
    return GlobalLatent(mean, covs, np.arange(n, dtype=np.int64), None)


def update_q_w(x: np.ndarray, z: GlobalLatent, alpha: ArdPosterior, precision: Precision,
               gamma_mean: float = 1.0, mask=None, name: str = "view") -> ProjectionPosterior:
    """Optimal q(W) for one view (ridge regression of X on <Z> with ARD penalty)."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if z.n != n or alpha.b.shape != (z.k,):
        raise StructuralError(f"view {name!r}: data {x.shape}, Z {z.mean.shape}, alpha {alpha.b.shape}")
    rows = _row_mask(mask, n)
    prior = gamma_mean * np.diag(alpha.mean)
    prec = _as_precision(precision, n, d)
    if isinstance(prec, float):
        lam = prior + prec * z.second_moment(rows)
        cov, _ = spd_inverse(lam, f"q(W) precision of view {name!r}")
        mean = prec * (x[rows].T @ z.mean[rows]) @ cov
        return ProjectionPosterior(mean, cov)
    p = prec * rows[:, None]
    mu = z.mean
    group_p = np.zeros((z.covs.shape[0], d))
    np.add.at(group_p, z.group, p)
    lam = (prior[None] + np.einsum("nd,nk,nl->dkl", p, mu, mu, optimize=True)
           + np.einsum("gd,gkl->dkl", group_p, z.covs))
    covs, _ = spd_inverse(lam, f"q(W) row precisions of view {name!r}")
    h = (p * x).T @ mu
    return ProjectionPosterior(np.einsum("dk,dkl->dl", h, covs), covs)


def update_q_alpha(w: ProjectionPosterior, hp: Hyperparams) -> ArdPosterior:
    a = w.d / 2.0 + hp.a_alpha
    b = hp.b_alpha + 0.5 * hp.gamma_mean * w.sq_mean().sum(0)
    return ArdPosterior(float(a), b)


def tau_trace_terms(x, z: GlobalLatent, w: ProjectionPosterior, mask=None, x_var=None):
    """The three pieces of the expected squared residual of a shared-covariance view.

    Returns ``(sum <X^2>, Tr(<W><Z>^T X), Tr(<W^T W><Z^T Z>))`` over the observed rows.
    """
    x = np.asarray(x, dtype=float)
    rows = _row_mask(mask, x.shape[0])
    xr = x[rows]
    sq = float(np.sum(xr ** 2))
    if x_var is not None:
        sq += float(np.sum(np.asarray(x_var)[rows]))
    cross = float(np.sum((xr @ w.mean) * z.mean[rows]))
    if w.shared:
        quad = float(np.sum(w.second_moment() * z.second_moment(rows)))
    else:
        quad = float(np.sum(expected_sq_predictor(z, w)[rows]))
    return sq, cross, quad


def expected_sq_predictor(z: GlobalLatent, w: ProjectionPosterior) -> np.ndarray:
    """<(Z_n W_d^T)^2> for every entry, shape (N, D)."""
    mu = z.mean
    wr = w.row_second_moments()
    quad = np.einsum("nk,dkl,nl->nd", mu, wr, mu, optimize=True)
    cov_term = np.einsum("gkl,dkl->gd", z.covs, wr)[z.group]
    return quad + cov_term


def expected_sq_residual(x, z: GlobalLatent, w: ProjectionPosterior, x_var=None) -> np.ndarray:
    """Element-wise <(X_nd - Z_n W_d^T)^2>, shape (N, D)."""
    x = np.asarray(x, dtype=float)
    res = x ** 2 - 2.0 * x * (z.mean @ w.mean.T) + expected_sq_predictor(z, w)
    if x_var is not None:
        res = res + x_var
    return res


def update_q_tau(x, z: GlobalLatent, w: ProjectionPosterior, hp: Hyperparams, mask=None,
                 x_var=None, entry_mask=None, name: str = "view") -> NoisePosterior:
    """Optimal q(tau) for one view."""
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    rows = _row_mask(mask, n)
    if entry_mask is None:
        count = d * int(rows.sum())
        sq, cross, quad = tau_trace_terms(x, z, w, rows, x_var)
        resid = sq - 2.0 * cross + quad
    else:
        weights = np.asarray(entry_mask, dtype=float) * rows[:, None]
        count = float(weights.sum())
        resid = float(np.sum(weights * expected_sq_residual(np.where(weights > 0, x, 0.0), z, w, x_var)))
        sq, cross, quad = resid, 0.0, 0.0
    b = hp.b_tau + 0.5 * resid
    if not np.isfinite(b) or b <= 0:
        raise NumericalError(f"view {name!r}: noise rate b={b!r} not positive "
                             f"(sum X^2={sq!r}, Tr(W Z^T X)={cross!r}, Tr(WtW ZtZ)={quad!r})")
    return NoisePosterior(float(count / 2.0 + hp.a_tau), float(b))


# ---------------------------------------------------------------------------
# Evidence lower bound
# ---------------------------------------------------------------------------

def gaussian_expected_loglik(x, z: GlobalLatent, w: ProjectionPosterior, tau: NoisePosterior,
                             mask=None, x_var=None, entry_mask=None) -> float:
    """E_q[log N(X | Z W^T, tau^-1)] over the observed entries."""
    x = np.asarray(x, dtype=float)
    rows = _row_mask(mask, x.shape[0])
    if entry_mask is None:
        count = x.shape[1] * int(rows.sum())
        sq, cross, quad = tau_trace_terms(x, z, w, rows, x_var)
        resid = sq - 2.0 * cross + quad
    else:
        weights = np.asarray(entry_mask, dtype=float) * rows[:, None]
        count = float(weights.sum())
        resid = float(np.sum(weights * expected_sq_residual(np.where(weights > 0, x, 0.0), z, w, x_var)))
    return 0.5 * count * (tau.log_mean - LOG_2PI) - 0.5 * tau.mean * resid


def fa_elbo(z: GlobalLatent, views: Sequence, hp: Hyperparams) -> float:
    """Mean-field evidence lower bound of the conjugate layer.

    ``views`` are objects exposing ``w`` (ProjectionPosterior), ``alpha``
    (ArdPosterior), ``tau`` (NoisePosterior or None) and
    ``expected_loglik(z)``.
    """
    k = z.k
    tr_zz = np.trace(z.second_moment())
    total = -0.5 * tr_zz - 0.5 * z.n * k * LOG_2PI + z.entropy()
    for v in views:
        w, alpha = v.w, v.alpha
        gam = hp.gamma_mean
        total += float(np.sum(0.5 * (np.log(gam) + alpha.log_mean - LOG_2PI)) * w.d
                       - 0.5 * gam * np.sum(alpha.mean * w.sq_mean().sum(0)))
        total += w.entropy()
        total += float(np.sum(_gamma_expected_log_prior(alpha.a, alpha.b, hp.a_alpha, hp.b_alpha)
                              + _gamma_entropy(alpha.a, alpha.b)))
        if v.tau is not None:
            total += float(_gamma_expected_log_prior(v.tau.a, v.tau.b, hp.a_tau, hp.b_tau)
                           + _gamma_entropy(v.tau.a, v.tau.b))
        total += v.expected_loglik(z)
    if not np.isfinite(total):
        raise NumericalError(f"fa_elbo is not finite ({total!r})")
    return float(total)


# ---------------------------------------------------------------------------
# ARD pruning
# ---------------------------------------------------------------------------

def factor_relevance(w_mean: np.ndarray, mode: str = "abs_mean") -> np.ndarray:
    """Mean over the rows of a projection matrix, absolute or signed."""
    if mode == "abs_mean":
        return np.abs(w_mean).mean(0)
    if mode == "signed_mean":
        return w_mean.mean(0)
    raise StructuralError(f"unknown relevance mode {mode!r}")


def factor_mask(w_means: Sequence[np.ndarray], threshold: float) -> np.ndarray:
    """Factors whose relevance reaches ``threshold`` times the view maximum in some view."""
    if not w_means:
        raise StructuralError("no views to compute factor relevance from")
    keep = np.zeros(w_means[0].shape[1], dtype=bool)
    for wm in w_means:
        r = factor_relevance(wm)
        top = r.max()
        if top > 0:
            keep |= r >= threshold * top
    return keep


def prune_factors(model, threshold: Optional[float] = None) -> np.ndarray:
    """Drop irrelevant latent factors from every posterior of ``model``.

    ``model`` must expose ``z``, ``hp`` and ``views`` (a mapping of view
    objects with ``w`` and ``alpha``, and ``select_factors(keep)``).
    Returns the boolean mask of retained factors.
    """
    if threshold is None:
        threshold = model.hp.prune_threshold
    views = list(model.views.values())
    keep = factor_mask([v.w.mean for v in views], threshold)
    if not keep.any():
        raise NumericalError("pruning would remove every latent factor; refusing")
    if keep.all():
        return keep
    model.z = model.z.select(keep)
    for v in views:
        v.select_factors(keep)
    model.hp.k_c = int(keep.sum())
    return keep


# ---------------------------------------------------------------------------
# Latent rotation
# ---------------------------------------------------------------------------

def _rotation_objective(r_flat, k, zz, n, views_stats, hp):
    r = r_flat.reshape(k, k)
    try:
        rinv = np.linalg.inv(r)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros_like(r_flat)
    sign, logdet = np.linalg.slogdet(r)
    if sign == 0:
        return np.inf, np.zeros_like(r_flat)
    d_total = sum(d for d, _, _ in views_stats)
    a_zz = rinv @ zz @ rinv.T
    value = -0.5 * np.trace(a_zz) + (d_total - n) * logdet
    grad = rinv.T @ a_zz + (d_total - n) * rinv.T
    for _, shape, s in views_stats:
        rs = s @ r
        denom = hp.b_alpha + 0.5 * hp.gamma_mean * np.einsum("kj,kj->j", r, rs)
        value -= shape * np.sum(np.log(denom))
        grad -= shape * hp.gamma_mean * rs / denom[None, :]
    return -value, -grad.ravel()


def rotate_latent(model) -> np.ndarray:
    """Apply the invertible latent transform that maximizes the bound.

    Moments transform as ``<Z> -> <Z> R^-T`` and ``<W> -> <W> R`` so that
    every expected reconstruction ``<Z><W>^T`` and every likelihood term is
    unchanged; only the Gaussian priors, the ARD terms (with q(alpha)
    re-optimized) and the entropies move.  Returns the transform.
    """
    from scipy.optimize import minimize

    z = model.z
    k = z.k
    views = list(model.views.values())
    stats = [(v.w.d, v.w.d / 2.0 + model.hp.a_alpha, v.w.second_moment()) for v in views]
    res = minimize(_rotation_objective, np.eye(k).ravel(), args=(k, z.second_moment(), z.n, stats, model.hp),
                   jac=True, method="L-BFGS-B", options={"maxiter": 100})
    r = res.x.reshape(k, k)
    f0, _ = _rotation_objective(np.eye(k).ravel(), k, z.second_moment(), z.n, stats, model.hp)
    if not np.isfinite(res.fun) or res.fun >= f0:
        return np.eye(k)
    rinv = np.linalg.inv(r)
    covs = rinv @ z.covs @ rinv.T
    model.z = GlobalLatent(z.mean @ rinv.T, 0.5 * (covs + np.swapaxes(covs, -1, -2)), z.group, z.patterns)
    for v in views:
        cov = r.T @ v.w.cov @ r
        v.w = ProjectionPosterior(v.w.mean @ r, 0.5 * (cov + np.swapaxes(cov, -1, -2)))
        v.alpha = update_q_alpha(v.w, model.hp)
    return r
