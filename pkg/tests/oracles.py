"""Slow reference implementations used as test oracles.

Everything here is written with explicit loops or dense joint matrices and
shares no code with the package beyond plain numpy.
"""

import numpy as np


def random_spd(rng, k, scale=0.3):
    a = rng.standard_normal((k, k)) * scale
    return a @ a.T + 0.1 * np.eye(k)


def q_z_dense(views, n, k):
    """Joint q(vec Z) by assembling the full NK x NK precision matrix.

    ``views`` is a list of dicts with keys x (N x D), w_mean (D x K),
    w_rowcov (D x K x K), prec (N x D per-entry precision, zero where unobserved).
    Returns (mean N x K, per-row covariance N x K x K).
    """
    big = np.eye(n * k)
    lin = np.zeros(n * k)
    for v in views:
        d = v["x"].shape[1]
        for i in range(n):
            for j in range(d):
                p = v["prec"][i, j]
                if p == 0:
                    continue
                wj = v["w_mean"][j]
                ww = np.outer(wj, wj) + v["w_rowcov"][j]
                big[i * k:(i + 1) * k, i * k:(i + 1) * k] += p * ww
                lin[i * k:(i + 1) * k] += p * v["x"][i, j] * wj
    cov = np.linalg.inv(big)
    mean = (cov @ lin).reshape(n, k)
    blocks = np.stack([cov[i * k:(i + 1) * k, i * k:(i + 1) * k] for i in range(n)])
    return mean, blocks


def q_w_loops(x, prec, z_mean, z_covs, alpha_mean, gamma=1.0):
    """Row-by-row ridge solution; z_covs has one K x K block per sample."""
    n, d = x.shape
    k = z_mean.shape[1]
    means = np.zeros((d, k))
    covs = np.zeros((d, k, k))
    for j in range(d):
        lam = gamma * np.diag(alpha_mean).astype(float)
        h = np.zeros(k)
        for i in range(n):
            zz = np.outer(z_mean[i], z_mean[i]) + z_covs[i]
            lam = lam + prec[i, j] * zz
            h = h + prec[i, j] * x[i, j] * z_mean[i]
        covs[j] = np.linalg.inv(lam)
        means[j] = covs[j] @ h
    return means, covs


def q_alpha_loops(w_mean, w_rowcov, a0, b0, gamma=1.0):
    d, k = w_mean.shape
    b = np.full(k, float(b0))
    for kk in range(k):
        for j in range(d):
            b[kk] += 0.5 * gamma * (w_mean[j, kk] ** 2 + w_rowcov[j, kk, kk])
    return a0 + d / 2.0, b


def q_tau_loops(x, rows, z_mean, z_covs, w_mean, w_rowcov, a0, b0):
    n, d = x.shape
    count = 0
    resid = 0.0
    for i in range(n):
        if not rows[i]:
            continue
        zz = np.outer(z_mean[i], z_mean[i]) + z_covs[i]
        for j in range(d):
            ww = np.outer(w_mean[j], w_mean[j]) + w_rowcov[j]
            resid += x[i, j] ** 2 - 2 * x[i, j] * (z_mean[i] @ w_mean[j]) + np.trace(zz @ ww)
            count += 1
    return a0 + count / 2.0, b0 + 0.5 * resid


def gaussian_condition(w_list, tau_list, x_list):
    """Exact posterior of z ~ N(0, I) given x_m = W_m z + noise(tau_m), for one sample."""
    k = w_list[0].shape[1]
    w = np.vstack(w_list)
    noise = np.concatenate([np.full(wm.shape[0], 1.0 / t) for wm, t in zip(w_list, tau_list)])
    x = np.concatenate(x_list)
    s_xx = w @ w.T + np.diag(noise)
    gain = w.T @ np.linalg.inv(s_xx)
    return gain @ x, np.eye(k) - gain @ w


def classic_vae_elbo(encoder, decoder, x, eps, sigma):
    """Plain VAE ELBO with a standard normal prior, from raw layer tuples.

    ``encoder``/``decoder`` are lists of (weight, bias, activation).
    """
    def run(layers, h):
        for wgt, b, act in layers:
            h = h @ wgt + b
            if act == "tanh":
                h = np.tanh(h)
            elif act == "relu":
                h = np.maximum(h, 0.0)
        return h

    out = run(encoder, x)
    latent = out.shape[1] // 2
    mu, logvar = out[:, :latent], np.clip(out[:, latent:], -12.0, 12.0)
    f = mu + np.exp(0.5 * logvar) * eps
    xh = run(decoder, f)
    total = 0.0
    for i in range(x.shape[0]):
        ll = 0.0
        for j in range(x.shape[1]):
            ll += -0.5 * ((x[i, j] - xh[i, j]) / sigma) ** 2 - 0.5 * np.log(2 * np.pi * sigma ** 2)
        kl = 0.0
        for j in range(latent):
            kl += 0.5 * (np.exp(logvar[i, j]) + mu[i, j] ** 2 - 1.0 - logvar[i, j])
        total += ll - kl
    return total


def bernoulli_loglik(z, y):
    """Exact log p(y | z) for a logistic link."""
    s = 2.0 * y - 1.0
    return -np.logaddexp(0.0, -s * z)


def finite_difference_grads(fn, params, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of each array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            up = fn()
            p[idx] = orig - step
            down = fn()
            p[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out


def max_relative_error(analytic, numeric):
    """Largest per-array relative error ||a - n|| / max(||a||, ||n||)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
