"""Inference on a trained model: conditional latent posteriors, generation,
interpolation and factor relevance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import fa_core
from .errors import StructuralError
from .fa_core import GlobalLatent, LinearTerm
from .model import FAVAE
from .neural import decode
from .views import FrozenLatentView, MultilabelView, VaeView, View, jj_lambda, vae_view_pseudo_obs

VARIANCE_FLOOR = 1e-12


def _view(model: FAVAE, name: str) -> View:
    return model[name]


def _rows(a, what: str) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise StructuralError(f"{what} must be a matrix")
    return a


def encode_evidence(model: FAVAE, name: str, data, seed=None, mode: Optional[str] = None) -> np.ndarray:
    """Turn raw observations of view ``name`` into the rows the latent layer sees.

    VAE views (and frozen views that carry their encoder) go through the
    encoder, sampling or taking the mean according to the view's
    ``pseudo_obs_mode`` unless ``mode`` overrides it.  Other views pass through.
    """
    view = _view(model, name)
    data = _rows(data, f"evidence for view {name!r}")
    net = getattr(view, "net", None)
    if isinstance(view, VaeView) or (isinstance(view, FrozenLatentView) and net is not None
                                     and data.shape[1] == net.input_dim):
        if mode is None:
            mode = getattr(view, "pseudo_obs_mode", "mean")
        return vae_view_pseudo_obs(net, data, mode, None if mode == "mean" else seed).values
    return data


def _check_evidence(view: View, x: np.ndarray):
    if x.shape[1] != view.w.d:
        raise StructuralError(f"evidence for view {view.name!r} has {x.shape[1]} columns, expected {view.w.d}")
    if not np.all(np.isfinite(x)):
        raise StructuralError(f"evidence for view {view.name!r} contains NaN or Inf")
    if isinstance(view, MultilabelView) and not np.all(np.isin(x, (0.0, 1.0))):
        raise StructuralError(f"evidence for multilabel view {view.name!r} must be 0/1")


def posterior_z_given(model: FAVAE, given: Dict[str, np.ndarray], n: int = 1,
                      max_iter: int = 100, tol: float = 1e-10) -> GlobalLatent:
    """q(Z) for new samples conditioned on the views in ``given`` only.

    ``given`` maps view names to pseudo-observation rows (labels for
    multilabel views).  Views left out contribute nothing, so the precision
    is ``I + sum_m <tau_m> <W_m^T W_m>`` over the given views.  Multilabel
    evidence enters through the logistic bound, whose variational
    parameters are iterated to a fixed point.  Empty evidence returns the
    prior for ``n`` samples with a warning.
    """
    if not given:
        warnings.warn("no evidence given; returning the prior over Z", stacklevel=2)
        return GlobalLatent.prior(n, model.k)
    views = {name: _view(model, name) for name in given}
    xs = {name: _rows(x, f"evidence for view {name!r}") for name, x in given.items()}
    ns = {x.shape[0] for x in xs.values()}
    if len(ns) != 1:
        raise StructuralError(f"evidence row counts differ: {sorted(ns)}")
    n = ns.pop()
    for name, x in xs.items():
        _check_evidence(views[name], x)

    fixed = [LinearTerm(xs[name], v.w, v.tau.mean, None, name)
             for name, v in views.items() if not isinstance(v, MultilabelView)]
    labelled = [name for name, v in views.items() if isinstance(v, MultilabelView)]
    if not labelled:
        return fa_core.update_q_z(fixed, n, model.k)

    xi = {name: np.zeros_like(xs[name]) for name in labelled}
    z = None
    for _ in range(max_iter):
        terms = list(fixed)
        for name in labelled:
            lam = jj_lambda(xi[name])
            terms.append(LinearTerm((xs[name] - 0.5) / (2.0 * lam), views[name].w, 2.0 * lam, None, name))
        z = fa_core.update_q_z(terms, n, model.k)
        change = 0.0
        for name in labelled:
            new = np.sqrt(np.maximum(fa_core.expected_sq_predictor(z, views[name].w), 0.0))
            change = max(change, float(np.max(np.abs(new - xi[name]))))
            xi[name] = new
        if change < tol:
            break
    return z


@dataclass
class Generated:
    """Samples for one target view.

    ``values`` has shape (n_samples, n, D); ``codes`` holds the sampled
    pseudo-observations F*; ``probabilities`` is set for multilabel views.
    """

    view: str
    values: np.ndarray
    codes: np.ndarray
    probabilities: Optional[np.ndarray] = None


def generate_from_z(model: FAVAE, z, target: str, n_samples: int = 1, seed=0) -> Generated:
    """Draw F* ~ N(z <W>^T, <tau>^-1 I) and map it to the target view's data space."""
    if n_samples < 1:
        raise StructuralError("n_samples must be >= 1")
    if model.iteration == 0:
        raise StructuralError(f"view {target!r} has not been trained")
    view = _view(model, target)
    z = _rows(z, "latent codes")
    if z.shape[1] != model.k:
        raise StructuralError(f"latent codes have {z.shape[1]} columns, model has K={model.k}")
    mean = z @ view.w.mean.T
    if isinstance(view, MultilabelView):
        probs = np.broadcast_to(expit(mean), (n_samples,) + mean.shape).copy()
        codes = np.broadcast_to(mean, probs.shape).copy()
        return Generated(target, (probs >= 0.5).astype(float), codes, probs)
    rng = np.random.default_rng(seed)
    sd = np.sqrt(max(1.0 / view.tau.mean, VARIANCE_FLOOR))
    codes = mean + sd * rng.standard_normal((n_samples,) + mean.shape)
    net = getattr(view, "net", None)
    if net is not None:
        values = np.stack([decode(net, c) for c in codes])
    else:
        values = codes.copy()
    return Generated(target, values, codes)


def sample_z(z: GlobalLatent, n_samples: int, seed=0) -> np.ndarray:
    """Draws from q(Z), shape (n_samples, N, K)."""
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(z.sample_covs())
    eps = rng.standard_normal((n_samples,) + z.mean.shape)
    return z.mean + np.einsum("nkl,snl->snk", chol, eps)


@dataclass
class ConditionRequest:
    given: Dict[str, np.ndarray]
    target: str
    n_samples: int = 1
    seed: int = 0
    sample_latent: bool = False

    def validate(self, model: FAVAE):
        if self.target in self.given:
            raise StructuralError(f"target view {self.target!r} is also listed as evidence")
        for name in list(self.given) + [self.target]:
            model[name]
        if self.n_samples < 1:
            raise StructuralError("n_samples must be >= 1")


def conditional_generate(model: FAVAE, request: ConditionRequest) -> Generated:
    """Generate the target view from evidence on other views (evidence already encoded).

    With ``sample_latent`` each output sample uses its own draw from the
    conditional q(Z); otherwise all samples share its mean.
    """
    request.validate(model)
    z = posterior_z_given(model, request.given)
    if not request.sample_latent:
        return generate_from_z(model, z.mean, request.target, request.n_samples, request.seed)
    draws = sample_z(z, request.n_samples, request.seed)
    parts = [generate_from_z(model, d, request.target, 1, [request.seed, i]) for i, d in enumerate(draws)]
    probs = None if parts[0].probabilities is None else np.concatenate([p.probabilities for p in parts])
    return Generated(request.target, np.concatenate([p.values for p in parts]),
                     np.concatenate([p.codes for p in parts]), probs)


def cross_generate(model: FAVAE, source: str, data, target: str, n_samples: int = 1, seed=0) -> Generated:
    """Encode ``data`` from view ``source``, condition Z on it and generate view ``target``.

    Equivalent to ``generate_from_z(model, posterior_z_given(model,
    {source: encode_evidence(model, source, data, seed)}).mean, target,
    n_samples, seed)``.
    """
    _view(model, target)
    f = encode_evidence(model, source, data, seed)
    z = posterior_z_given(model, {source: f})
    return generate_from_z(model, z.mean, target, n_samples, seed)


def _interpolate(a, b, lambdas: Sequence[float]) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise StructuralError(f"endpoints differ in shape: {a.shape} vs {b.shape}")
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if np.any(~np.isfinite(lam)) or np.any(lam < 0) or np.any(lam > 1):
        raise StructuralError("interpolation weights must lie in [0, 1]")
    return np.stack([l * a + (1.0 - l) * b for l in lam])


def interpolate_private(f1, f2, lambdas: Sequence[float]) -> np.ndarray:
    """Convex combinations lambda * f1 + (1 - lambda) * f2 of two private codes."""
    return _interpolate(f1, f2, lambdas)


def interpolate_global(g1, g2, lambdas: Sequence[float]) -> np.ndarray:
    """Convex combinations of two global codes; decode with :func:`decode_global`."""
    return _interpolate(g1, g2, lambdas)


def lambda_grid(steps: int) -> np.ndarray:
    """``steps`` uniformly spaced weights from 1 (first endpoint) to 0."""
    if steps < 2:
        raise StructuralError("steps must be >= 2")
    return np.linspace(1.0, 0.0, steps)


def decode_private(model: FAVAE, name: str, codes) -> np.ndarray:
    view = _view(model, name)
    net = getattr(view, "net", None)
    codes = _rows(codes, "private codes")
    return decode(net, codes) if net is not None else codes


def decode_global(model: FAVAE, codes, views: Optional[Sequence[str]] = None, seed=0) -> Dict[str, Generated]:
    """Generate every (or each listed) view from the same global codes."""
    codes = _rows(codes, "global codes")
    names = list(views) if views is not None else list(model.views)
    return {name: generate_from_z(model, codes, name, 1, seed) for name in names}


@dataclass
class RelevanceReport:
    """Per-view factor relevance scores, ordered by a reference view."""

    mode: str
    views: List[str]
    scores: Dict[str, np.ndarray]
    reference: str
    ordering: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.ordering is None:
            self.ordering = np.argsort(-self.scores[self.reference], kind="stable")

    @property
    def k(self) -> int:
        return len(self.scores[self.reference])

    def matrix(self) -> np.ndarray:
        """Scores as a views x factors matrix in factor order."""
        return np.stack([self.scores[v] for v in self.views])

    def active(self, threshold: float = 0.1) -> Dict[str, np.ndarray]:
        """Per view, the factors scoring at least ``threshold`` times the view maximum."""
        out = {}
        for v in self.views:
            r = self.scores[v]
            top = np.max(np.abs(r)) if r.size else 0.0
            out[v] = np.abs(r) >= threshold * top if top > 0 else np.zeros(r.shape, dtype=bool)
        return out

    def to_text(self) -> str:
        head = f"# factor relevance, mode={self.mode}"
        if self.mode == "abs_mean":
            head += " (mean of |W| over rows; the signed mean can cancel)"
        lines = [head, "factor\t" + "\t".join(self.views)]
        for k in self.ordering:
            lines.append(f"{k}\t" + "\t".join(f"{self.scores[v][k]:.6g}" for v in self.views))
        return "\n".join(lines) + "\n"

    def heatmap(self) -> np.ndarray:
        """Views x factors (in report order), each row scaled to [0, 1]."""
        m = np.abs(self.matrix()[:, self.ordering])
        top = m.max(axis=1, keepdims=True)
        return np.divide(m, top, out=np.zeros_like(m), where=top > 0)

    def save_heatmap(self, path) -> None:
        """Grayscale PNG with one pixel per (view, factor); white is most relevant."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        plt.imsave(path, self.heatmap(), cmap="gray", vmin=0.0, vmax=1.0)


def latent_relevance(model: FAVAE, mode: str = "abs_mean", reference: Optional[str] = None) -> RelevanceReport:
    """Mean of each W column over its rows, per view."""
    names = list(model.views)
    if not names:
        raise StructuralError("model has no views")
    reference = reference or names[0]
    model[reference]
    scores = {n: fa_core.factor_relevance(model[n].w.mean, mode) for n in names}
    return RelevanceReport(mode, names, scores, reference)
