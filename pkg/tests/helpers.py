"""Shared test utilities: independent oracles and a finite-difference checker.

The oracles deliberately mirror the written contracts, not the production
code: explicit double loops, explicit softmax, closed-form KL.  They are the
reference side of every dual-route check and must stay that way.
"""
from __future__ import annotations

import math

import numpy as np
import torch


def naive_contrastive(matrix: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Symmetric diagonal cross-entropy by explicit loops over all pairs."""
    c = np.asarray(matrix, dtype=np.float64)
    n = c.shape[0]
    keep = [k for k in range(n) if valid is None or valid[k]]
    sub = np.array([[c[i, j] for j in keep] for i in keep])
    m = len(keep)

    def row_term(row):
        exps = [math.exp(v) for v in row]
        return -math.log(exps[0] / sum(exps))

    loss_speech = 0.0
    loss_phoneme = 0.0
    for i in range(m):
        row = [sub[i, i]] + [sub[i, j] for j in range(m) if j != i]
        col = [sub[i, i]] + [sub[j, i] for j in range(m) if j != i]
        loss_speech += row_term(row)
        loss_phoneme += row_term(col)
    return 0.5 * (loss_speech / m + loss_phoneme / m)


def naive_similarity(speech: np.ndarray, phoneme: np.ndarray, tau: float,
                     l2: bool) -> np.ndarray:
    """tau * S_re P_re^T with explicit flattening, one dot product at a time."""
    b, t, d = speech.shape
    s = speech.reshape(b * t, d).astype(np.float64)
    p = phoneme.reshape(b * t, d).astype(np.float64)
    if l2:
        s = np.array([row / max(np.linalg.norm(row), 1e-12) for row in s])
        p = np.array([row / max(np.linalg.norm(row), 1e-12) for row in p])
    out = np.empty((b * t, b * t))
    for i in range(b * t):
        for j in range(b * t):
            out[i, j] = tau * float(np.dot(s[i], p[j]))
    return out


def closed_form_kl(mu: np.ndarray, sigma: np.ndarray) -> float:
    """0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2), one term at a time."""
    total = 0.0
    for m, s in zip(np.ravel(mu), np.ravel(sigma)):
        total += 0.5 * (m * m + s * s - 1.0 - math.log(s * s))
    return total


def monte_carlo_kl(mu: np.ndarray, sigma: np.ndarray, n: int = 1_000_000,
                   seed: int = 0) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) estimated from posterior samples."""
    rng = np.random.default_rng(seed)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * (((z - mu) / sigma) ** 2 + np.log(2 * np.pi * sigma ** 2)).sum(axis=1)
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi)).sum(axis=1)
    return float(np.mean(log_q - log_p))


def finite_difference_check(loss_fn, params: list[torch.Tensor],
                            rel_tol: float = 1e-3, abs_floor: float = 1e-8,
                            max_entries: int | None = None,
                            rng: np.random.Generator | None = None):
    """Compare autograd gradients against central differences, in float64.

    ``loss_fn`` must be deterministic.  Returns (n_checked, n_failed,
    worst_rel_err).  Entries where both sides are below ``abs_floor`` count
    as passes (the quotient is noise there).
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    n_checked = 0
    n_failed = 0
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().view(-1)
        g_flat = (torch.zeros_like(flat) if g is None else g.detach().reshape(-1))
        idxs = range(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            assert rng is not None
            idxs = sorted(rng.choice(flat.numel(), size=max_entries, replace=False))
        for k in idxs:
            orig = flat[k].item()
            h = 1e-6 * max(1.0, abs(orig))
            with torch.no_grad():
                flat[k] = orig + h
                up = float(loss_fn())
                flat[k] = orig - h
                down = float(loss_fn())
                flat[k] = orig
            fd = (up - down) / (2 * h)
            an = float(g_flat[k])
            n_checked += 1
            if abs(fd) < abs_floor and abs(an) < abs_floor:
                continue
            rel = abs(an - fd) / max(abs(an), abs(fd))
            worst = max(worst, rel)
            if rel > rel_tol:
                n_failed += 1
    return n_checked, n_failed, worst
