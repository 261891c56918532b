"""Small fully connected VAE with hand-written reverse-mode gradients.

The encoder maps an observation to the mean and log-variance of a diagonal
Gaussian code; the decoder maps a code to the mean of a Gaussian with fixed
scale ``decoder_sigma``.  The ELBO uses a Gaussian prior ``N(m, tau^-1 I)``
whose mean comes from the factor-analysis layer; ``m = 0, tau = 1`` gives the
classic VAE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import NumericalError, StructuralError

LOGVAR_MIN = -12.0
LOGVAR_MAX = 12.0
LOG_2PI = float(np.log(2.0 * np.pi))


def _tanh(x):
    return np.tanh(x)


def _relu(x):
    return np.maximum(x, 0.0)


def _identity(x):
    return x


ACTIVATIONS = {"tanh": _tanh, "relu": _relu, "identity": _identity}


def _activation_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post ** 2
    if name == "relu":
        return (pre > 0).astype(float)
    return None


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {self.activation!r}")


def init_layers(sizes: Sequence[int], activation: str, rng) -> List[Dense]:
    """Glorot-normal layers; the last one is linear."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        act = activation if i < len(sizes) - 2 else "identity"
        layers.append(Dense(rng.normal(0.0, std, (fan_in, fan_out)), np.zeros(fan_out), act))
    return layers


def mlp_forward(layers: Sequence[Dense], x: np.ndarray):
    """Forward pass returning the output and the cache needed by ``mlp_backward``."""
    cache = []
    h = x
    for i, layer in enumerate(layers):
        pre = h @ layer.weight + layer.bias
        post = ACTIVATIONS[layer.activation](pre)
        if not np.all(np.isfinite(post)):
            raise NumericalError(f"non-finite output in layer {i} ({layer.activation})")
        cache.append((h, pre, post))
        h = post
    return h, cache


def mlp_backward(layers: Sequence[Dense], cache, grad_out: np.ndarray):
    """Backpropagate ``grad_out``; returns per-layer (dW, db) and the input gradient."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h_in, pre, post = cache[i]
        local = _activation_grad(layer.activation, pre, post)
        if local is not None:
            g = g * local
        grads[i] = (h_in.T @ g, g.sum(0))
        g = g @ layer.weight.T
    return grads, g


@dataclass
class VaeNet:
    """Encoder/decoder pair of one VAE view."""

    encoder: List[Dense]
    decoder: List[Dense]
    latent_dim: int
    beta: float = 1.0
    decoder_sigma: float = 0.1

    def __post_init__(self):
        if self.encoder[-1].weight.shape[1] != 2 * self.latent_dim:
            raise StructuralError("encoder must output 2 * latent_dim values")
        if self.decoder[0].weight.shape[0] != self.latent_dim:
            raise StructuralError("decoder input size must equal latent_dim")
        if not self.decoder_sigma > 0:
            raise StructuralError("decoder_sigma must be positive")
        if self.beta < 1:
            raise StructuralError("beta must be >= 1")

    @classmethod
    def create(cls, input_dim: int, latent_dim: int, hidden: Sequence[int] = (64,),
               activation: str = "tanh", beta: float = 1.0, decoder_sigma: float = 0.1, seed=0):
        rng = np.random.default_rng(seed)
        enc = init_layers([input_dim, *hidden, 2 * latent_dim], activation, rng)
        dec = init_layers([latent_dim, *reversed(hidden), input_dim], activation, rng)
        return cls(enc, dec, latent_dim, beta, decoder_sigma)

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[0]

    def params(self) -> List[np.ndarray]:
        """All parameter arrays, encoder first, weight before bias."""
        out = []
        for layer in (*self.encoder, *self.decoder):
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "VaeNet":
        def dup(layers):
            return [Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in layers]
        return VaeNet(dup(self.encoder), dup(self.decoder), self.latent_dim, self.beta, self.decoder_sigma)


def _encode_raw(net: VaeNet, x):
    out, cache = mlp_forward(net.encoder, np.atleast_2d(x))
    d = net.latent_dim
    return out[:, :d], out[:, d:], cache


def encode(net: VaeNet, x: np.ndarray):
    """Mean and clamped log-variance of q(F | x); accepts a vector or a batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.input_dim:
        raise StructuralError(f"input has {x.shape[-1]} features, network expects {net.input_dim}")
    mu, raw, _ = _encode_raw(net, x)
    logvar = np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)
    if x.ndim == 1:
        return mu[0], logvar[0]
    return mu, logvar


def decode(net: VaeNet, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    out, _ = mlp_forward(net.decoder, np.atleast_2d(f))
    return out[0] if f.ndim == 1 else out


def reparam_sample(mu, logvar, seed=None, eps=None):
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``seed``."""
    mu = np.asarray(mu, dtype=float)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
    return mu + np.exp(0.5 * np.asarray(logvar)) * eps


def kl_to_fa_prior(mu, logvar, prior_mean, tau: float):
    """KL( N(mu, diag(exp logvar)) || N(prior_mean, tau^-1 I) ), summed over the last axis."""
    if not tau > 0:
        raise StructuralError(f"prior precision must be positive, got {tau!r}")
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    terms = tau * (np.exp(logvar) + (mu - prior_mean) ** 2) - 1.0 - logvar - np.log(tau)
    return 0.5 * terms.sum(-1)


def gaussian_log_lik(x, x_hat, sigma: float):
    """log N(x | x_hat, sigma^2 I), summed over the last axis."""
    resid = np.asarray(x, dtype=float) - x_hat
    return -0.5 * ((resid / sigma) ** 2 + np.log(2.0 * np.pi * sigma ** 2)).sum(-1)


@dataclass
class FaPrior:
    """Gaussian prior N(mean, tau^-1 I) placed on a VAE view's codes."""

    mean: np.ndarray
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise StructuralError("FaPrior.tau must be positive")
        if not np.all(np.isfinite(self.mean)):
            raise NumericalError("FaPrior.mean has non-finite entries")

    @classmethod
    def standard(cls, n: int, d: int):
        return cls(np.zeros((n, d)), 1.0)


@dataclass
class ElboResult:
    elbo: float
    gll: float
    kl: float
    grads: List[np.ndarray]


def vae_elbo_batch(net: VaeNet, x: np.ndarray, prior: FaPrior, seed=None, eps=None) -> ElboResult:
    """Summed ELBO of a batch under the given prior, with gradients for every parameter.

    Gradients are of the ELBO itself (ascent direction), ordered like
    ``net.params()``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if prior.mean.shape != (n, net.latent_dim):
        raise StructuralError(f"prior mean {prior.mean.shape} does not match batch ({n}, {net.latent_dim})")
    mu, raw_lv, enc_cache = _encode_raw(net, x)
    logvar = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(mu.shape)
    std = np.exp(0.5 * logvar)
    f = mu + std * eps
    x_hat, dec_cache = mlp_forward(net.decoder, f)

    sigma = net.decoder_sigma
    gll_rows = gaussian_log_lik(x, x_hat, sigma)
    kl_rows = kl_to_fa_prior(mu, logvar, prior.mean, prior.tau)
    rows = gll_rows - net.beta * kl_rows
    bad = np.flatnonzero(~np.isfinite(rows))
    if bad.size:
        raise NumericalError(f"non-finite ELBO at batch sample {int(bad[0])}")

    g_xhat = (x - x_hat) / sigma ** 2
    dec_grads, g_f = mlp_backward(net.decoder, dec_cache, g_xhat)
    tau = prior.tau
    g_mu = g_f - net.beta * tau * (mu - prior.mean)
    g_lv = g_f * 0.5 * std * eps - net.beta * 0.5 * (tau * np.exp(logvar) - 1.0)
    g_lv = np.where((raw_lv < LOGVAR_MIN) | (raw_lv > LOGVAR_MAX), 0.0, g_lv)
    enc_grads, _ = mlp_backward(net.encoder, enc_cache, np.concatenate([g_mu, g_lv], axis=1))

    grads = []
    for dw, db in (*enc_grads, *dec_grads):
        grads.extend((dw, db))
    return ElboResult(float(rows.sum()), float(gll_rows.sum()), float(kl_rows.sum()), grads)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None


def optimize_step(net: VaeNet, grads: Sequence[np.ndarray], state: AdamState) -> VaeNet:
    """One Adam ascent step on the ELBO, applied in place."""
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise StructuralError("gradient shapes do not match network parameters")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p += state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net


@dataclass
class EpochStats:
    elbo: float
    gll: float
    kl: float


def run_epoch(net: VaeNet, x: np.ndarray, prior_fn, state: AdamState, batch_size: int, rng) -> EpochStats:
    """One pass over ``x`` in shuffled mini-batches.

    ``prior_fn(rows)`` returns the FaPrior for the given row indices.
    Returned statistics are per-sample averages.
    """
    n = x.shape[0]
    order = rng.permutation(n)
    tot = np.zeros(3)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        eps = rng.standard_normal((idx.size, net.latent_dim))
        res = vae_elbo_batch(net, x[idx], prior_fn(idx), eps=eps)
        optimize_step(net, [g / idx.size for g in res.grads], state)
        tot += (res.elbo, res.gll, res.kl)
    tot /= max(n, 1)
    return EpochStats(*tot)


@dataclass
class StandaloneHistory:
    epochs: List[EpochStats] = field(default_factory=list)


def train_standalone(net: VaeNet, x: np.ndarray, epochs: int, batch_size: int = 64,
                     learning_rate: float = 1e-3, seed=0, state: Optional[AdamState] = None):
    """Train ``net`` as a plain VAE with a standard normal prior."""
    rng = np.random.default_rng(seed)
    state = state or AdamState(learning_rate=learning_rate)
    hist = StandaloneHistory()
    d = net.latent_dim
    for _ in range(epochs):
        hist.epochs.append(run_epoch(net, x, lambda idx: FaPrior.standard(idx.size, d), state, batch_size, rng))
    return hist
