"""Batched small-matrix exponentials for the holonomy integrator.

The generators are Hermitian (potentials conjugated by unitary transport),
so exp(-s W) is computed by eigendecomposition: exact up to the eigh
tolerance, and the resulting factor has operator norm exactly
exp(-s * lambda_min(W)), which is what makes the per-sample domination
inequality an identity for the product scheme.  Ranks 1 and 2 use closed
forms to keep the per-step cost off the LAPACK path.
"""

from __future__ import annotations

import numpy as np

__all__ = ["expm_neg_hermitian", "expm_general"]


def expm_neg_hermitian(W, s):
    """exp(-s * W) for a batch of Hermitian matrices W, shape (..., d, d);
    s is a scalar or batch of nonnegative step sizes."""
    W = np.asarray(W)
    d = W.shape[-1]
    s = np.asarray(s, dtype=float)
    if d == 1:
        return np.exp(-s[..., None, None] * W.real) * np.ones_like(W)
    if d == 2:
        return _expm2(W, s)
    lam, U = np.linalg.eigh(W)
    e = np.exp(-s[..., None] * lam)
    return np.einsum("...ij,...j,...kj->...ik", U, e, U.conj())


def _expm2(W, s):
    # split W = mu*I + D with D traceless Hermitian, D^2 = rho^2 * I:
    # exp(-sW) = e^{-s mu} (cosh(s rho) I - sinh(s rho)/rho * D)
    a = W[..., 0, 0].real
    c = W[..., 1, 1].real
    b = W[..., 0, 1]
    mu = 0.5 * (a + c)
    rho = np.sqrt(0.25 * (a - c) ** 2 + np.abs(b) ** 2)
    sr = s * rho
    ch = np.cosh(sr)
    # sinh(x)/x, stable at 0
    shr = np.where(sr < 1e-6, 1.0 + sr**2 / 6.0, np.sinh(np.maximum(sr, 1e-300)) / np.maximum(sr, 1e-300))
    out = np.empty(np.broadcast(W[..., 0, 0], s).shape + (2, 2), dtype=complex)
    f = -s * shr
    out[..., 0, 0] = ch + f * (a - mu)
    out[..., 1, 1] = ch + f * (c - mu)
    out[..., 0, 1] = f * b
    out[..., 1, 0] = f * np.conj(b)
    return np.exp(-s * mu)[..., None, None] * out


def expm_general(A):
    """scipy Pade exponential for one (possibly non-Hermitian) matrix."""
    from scipy.linalg import expm

    return expm(np.asarray(A))
