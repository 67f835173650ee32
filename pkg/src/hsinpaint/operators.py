"""Proximal and denoising building blocks for the sparse-coding and low-rank steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "soft_threshold",
    "svt",
    "operator_norm",
    "LinearDenoiser",
    "SoftThresholdDenoiser",
    "dsg_nlm_weights",
    "build_dsg_nlm",
    "grad_f",
    "lipschitz_of_grad",
    "pnp_ista_step",
]


def soft_threshold(v, t):
    """Elementwise ``sign(v) * max(|v| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def svt(mat, t):
    """Singular value thresholding: shrink the singular values of `mat` by `t`."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    mat = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise np.linalg.LinAlgError("SVT input contains non-finite values")
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    s = np.maximum(s - t, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep]


def operator_norm(a, n_iter=500, tol=1e-13, seed=0):
    """Largest singular value of a matrix by power iteration on ``A^T A``."""
    a = np.asarray(a, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    sigma2 = 0.0
    for _ in range(n_iter):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(nw - sigma2) <= tol * nw:
            sigma2 = nw
            break
        sigma2 = nw
    return float(np.sqrt(sigma2))


@dataclass(frozen=True)
class LinearDenoiser:
    """A fixed linear smoother ``T = (1 - theta) I + theta R`` acting on flattened grids.

    `weights` holds the full ``T``.  It is applied either to a whole array of
    `grid_shape` or columnwise to a matrix with ``n`` rows.
    """

    weights: sp.csr_matrix
    theta: float
    grid_shape: tuple

    @property
    def n(self):
        return self.weights.shape[0]

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape == tuple(self.grid_shape):
            return (self.weights @ v.ravel()).reshape(v.shape)
        if v.shape[0] != self.n:
            raise ValueError(f"denoiser of size {self.n} cannot act on shape {v.shape}")
        return self.weights @ v

    def __call__(self, v, step=None):
        return self.apply(v)


@dataclass(frozen=True)
class SoftThresholdDenoiser:
    """ISTA's proximal step: threshold ``step * weight``."""

    weight: float

    def __call__(self, v, step=1.0):
        return soft_threshold(v, step * self.weight)


def _sinkhorn_symmetric(k, max_iter, tol):
    # symmetric scaling d such that diag(d) K diag(d) has unit row sums
    d = np.ones(k.shape[0])
    for _ in range(max_iter):
        kd = k @ d
        if np.max(np.abs(d * kd - 1.0)) < tol:
            break
        d = np.sqrt(d / kd)
    dk = sp.diags(d)
    return (dk @ k @ dk).tocsr()


def dsg_nlm_weights(guide, patch_radius=1, search_radius=2, h=0.1,
                    sinkhorn_iter=50, sinkhorn_tol=1e-6):
    """Symmetric, doubly stochastic non-local-means weight matrix.

    Weights compare ``(2*patch_radius+1)^2`` neighbourhoods of the fixed
    `guide` image inside a ``(2*search_radius+1)^2`` search window.  The
    kernel is symmetrised, Sinkhorn balanced, then any residual row-sum
    deficit is moved onto the diagonal so the result is exactly doubly
    stochastic.
    """
    guide = np.asarray(guide, dtype=np.float64)
    if guide.ndim != 2:
        raise ValueError("guide must be a 2-D array")
    if patch_radius < 0 or search_radius < 1:
        raise ValueError("radii must be positive")
    if not h > 0:
        raise ValueError("bandwidth h must be positive")
    nr, nc = guide.shape
    n = nr * nc
    pr = patch_radius
    padded = np.pad(guide, pr, mode="reflect" if min(nr, nc) > pr else "edge")
    psize = (2 * pr + 1) ** 2
    idx = np.arange(n).reshape(nr, nc)

    rows, cols, vals = [], [], []
    s = search_radius
    for di in range(-s, s + 1):
        for dj in range(-s, s + 1):
            # pixel p=(i,j) paired with q=(i+di, j+dj)
            i0, i1 = max(0, -di), min(nr, nr - di)
            j0, j1 = max(0, -dj), min(nc, nc - dj)
            if i0 >= i1 or j0 >= j1:
                continue
            dist = np.zeros((i1 - i0, j1 - j0))
            for a in range(2 * pr + 1):
                for b in range(2 * pr + 1):
                    p = padded[i0 + a:i1 + a, j0 + b:j1 + b]
                    q = padded[i0 + di + a:i1 + di + a, j0 + dj + b:j1 + dj + b]
                    dist += (p - q) ** 2
            dist /= psize
            w = np.exp(-dist / h**2) if np.isfinite(h) else np.ones_like(dist)
            rows.append(idx[i0:i1, j0:j1].ravel())
            cols.append(idx[i0 + di:i1 + di, j0 + dj:j1 + dj].ravel())
            vals.append(w.ravel())
    k = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    if not np.all(np.isfinite(k.data)) or np.any(k.diagonal() <= 0):
        raise ValueError("degenerate NLM weights (check guide and bandwidth)")
    k = ((k + k.T) * 0.5).tocsr()
    w = _sinkhorn_symmetric(k, sinkhorn_iter, sinkhorn_tol)
    rs = np.asarray(w.sum(axis=1)).ravel()
    w = w / rs.max()
    w = (w + sp.diags(1.0 - np.asarray(w.sum(axis=1)).ravel())).tocsr()
    w.eliminate_zeros()
    return w


def build_dsg_nlm(guide, patch_radius=1, search_radius=2, h=0.1, theta=0.5, **kw):
    """Linear NLM denoiser ``(1 - theta) I + theta W`` with W doubly stochastic.

    For ``theta = 1/2`` the eigenvalues lie in ``[0, 1]`` and the operator is
    1/2-averaged by construction.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    r = dsg_nlm_weights(guide, patch_radius, search_radius, h, **kw)
    n = r.shape[0]
    t = ((1.0 - theta) * sp.identity(n, format="csr") + theta * r).tocsr()
    return LinearDenoiser(t, theta, tuple(np.shape(guide)))


def grad_f(alpha, phi, z, mu1):
    """Gradient of ``mu1/2 * ||z - Phi alpha||^2`` in the codes: ``mu1 Phi^T (Phi alpha - z)``."""
    alpha = np.asarray(alpha)
    if phi.shape[1] != alpha.shape[0] or phi.shape[0] != np.shape(z)[0]:
        raise ValueError(
            f"shape mismatch: Phi {phi.shape}, alpha {alpha.shape}, z {np.shape(z)}"
        )
    return mu1 * (phi.T @ (phi @ alpha - z))


def lipschitz_of_grad(phi, mu1):
    """The smoothness constant ``beta = mu1 * ||Phi||_2^2``."""
    return mu1 * operator_norm(phi) ** 2


def pnp_ista_step(alpha, denoiser, phi, z, mu1, step, beta=None):
    """One plug-and-play ISTA step ``D(alpha - step * grad_f(alpha))``.

    With `SoftThresholdDenoiser` this is exactly an ISTA step for
    ``mu1/2 ||z - Phi alpha||^2 + w_s ||alpha||_1``.
    """
    if beta is None:
        beta = lipschitz_of_grad(phi, mu1)
    if not 0.0 < step <= 2.0 / beta * (1 + 1e-12):
        raise ValueError(f"step {step} outside (0, 2/beta] with beta={beta:g}")
    out = denoiser(alpha - step * grad_f(alpha, phi, z, mu1), step)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite PnP-ISTA iterate")
    return out
