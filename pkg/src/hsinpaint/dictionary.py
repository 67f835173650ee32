"""Self-supervised dictionary learning and a reference LASSO solver."""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .cube import extract_patches
from .operators import soft_threshold

__all__ = [
    "LassoResult",
    "ista_lasso",
    "lasso_objective",
    "learn_dictionary",
    "default_n_atoms",
    "training_patches",
    "training_weights",
    "normalize_atoms",
]

log = logging.getLogger(__name__)


class LassoResult(NamedTuple):
    code: np.ndarray
    n_iter: int
    converged: bool
    residual: float


def lasso_objective(target, phi, code, l1_weight):
    r = target - phi @ code
    return 0.5 * float(np.sum(r * r)) + l1_weight * float(np.sum(np.abs(code)))


def _optimality_residual(target, phi, code, l1_weight):
    g = phi.T @ (target - phi @ code)
    on = code != 0
    res = np.where(on, np.abs(g - l1_weight * np.sign(code)),
                   np.maximum(np.abs(g) - l1_weight, 0.0))
    return float(res.max()) if res.size else 0.0


def ista_lasso(target, phi, l1_weight, max_iter=10000, tol=1e-8, code0=None,
               lipschitz=None, check_every=10):
    """Solve ``min_a 1/2 ||p - Phi a||^2 + l1_weight ||a||_1`` by ISTA.

    `target` may be a vector or a matrix of independent columns.  Convergence
    is declared when the subgradient optimality residual drops to `tol`; if
    `max_iter` is hit first the current iterate is returned with
    ``converged=False``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[0] != phi.shape[0]:
        raise ValueError(f"target length {target.shape[0]} != atom dim {phi.shape[0]}")
    if l1_weight < 0:
        raise ValueError("l1_weight must be non-negative")
    if lipschitz is None:
        lipschitz = np.linalg.norm(phi, 2) ** 2
    step = 1.0 / lipschitz
    shape = (phi.shape[1],) + target.shape[1:]
    code = np.zeros(shape) if code0 is None else np.array(code0, dtype=np.float64)
    pt = phi.T @ target
    gram = phi.T @ phi
    res = _optimality_residual(target, phi, code, l1_weight)
    it = 0
    while res > tol and it < max_iter:
        for _ in range(check_every):
            code = soft_threshold(code - step * (gram @ code - pt), step * l1_weight)
            it += 1
        res = _optimality_residual(target, phi, code, l1_weight)
    converged = res <= tol
    if not converged:
        log.warning("ista_lasso stopped after %d iterations, residual %.3g", it, res)
    return LassoResult(code, it, converged, res)


def normalize_atoms(phi):
    norms = np.linalg.norm(phi, axis=0)
    return phi / np.where(norms > 0, norms, 1.0)


def default_n_atoms(patch_dim):
    """2000 atoms for 36x36 band patches, otherwise 1.5x the patch dimension."""
    return 2000 if patch_dim == 1296 else int(round(1.5 * patch_dim))


def training_patches(y, mask, layout):
    """Patches used for learning: fully observed ones when any exist, else all (zero filled)."""
    patches = extract_patches(np.where(mask.astype(bool), y, 0.0), layout)
    valid = extract_patches(mask.astype(np.float64), layout).min(axis=0) > 0
    if valid.any():
        return patches[:, valid]
    return patches


def training_weights(mask, layout):
    """Observation weights matching `training_patches`: None when fully observed patches exist."""
    w = extract_patches(mask.astype(np.float64), layout)
    if (w.min(axis=0) > 0).any():
        return None
    return w


def _spectral_norm_sq(phi, v, n_iter=30):
    for _ in range(n_iter):
        w = phi.T @ (phi @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 1.0, v
        v = w / nw
    return float(nw), v


def _seed_atoms(p, norms, n_atoms, rng):
    # k-means++ style: draw patches with probability proportional to the energy
    # left after projecting on the atoms chosen so far
    nz = np.flatnonzero(norms > 0)
    units = p[:, nz] / norms[nz]
    weight = norms[nz] ** 2
    resid = np.ones(nz.size)
    atoms = []
    for _ in range(min(n_atoms, nz.size)):
        prob = weight * resid
        if prob.sum() <= 1e-12 * weight.sum():
            break
        k = rng.choice(nz.size, p=prob / prob.sum())
        atoms.append(units[:, k])
        resid = np.clip(np.minimum(resid, 1.0 - (units[:, k] @ units) ** 2), 0.0, None)
    phi = np.empty((p.shape[0], n_atoms))
    phi[:, :len(atoms)] = np.array(atoms).T
    extra = n_atoms - len(atoms)
    if extra:
        base = units[:, rng.integers(0, nz.size, extra)]
        phi[:, len(atoms):] = base + 0.1 * rng.standard_normal(base.shape)
    return normalize_atoms(phi)


def learn_dictionary(patches, n_atoms, sparsity_weight=None, epochs=10, seed=0,
                     batch_size=256, ista_iter=30, weights=None):
    """Learn unit-norm atoms from the columns of `patches`.

    Mini-batch scheme: each batch is sparse coded by warm-started ISTA, its
    codes update running sufficient statistics over all patches, and then
    every used atom is replaced by its exact block minimiser on the unit
    sphere.  Atoms left unused during an epoch are re-seeded from the worst
    reconstructed patches.  The mean training objective therefore never
    increases from one epoch to the next.

    With `weights` (same shape as `patches`, 1 = observed) only observed
    entries enter the fit; see `_learn_masked`.

    Returns ``(atoms, objectives)`` where ``objectives[k]`` is the mean
    objective after epoch ``k`` (index 0 is the initial dictionary).
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("patches must be a (patch_dim, n_patches) matrix")
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != p.shape:
            raise ValueError(f"weights shape {weights.shape} != patches shape {p.shape}")
        p = p * weights
    norms = np.linalg.norm(p, axis=0)
    if not np.any(norms > 0):
        raise ValueError("cannot learn a dictionary from all-zero patches")
    rng = np.random.default_rng(seed)
    dim, n = p.shape

    phi = _seed_atoms(p, norms, n_atoms, rng)

    if sparsity_weight is None:
        sparsity_weight = 0.1 * float(np.max(np.abs(phi.T @ p)))
    lam = float(sparsity_weight)
    if weights is not None:
        return _learn_masked(p, weights, phi, lam, epochs, ista_iter, rng)

    codes = np.zeros((n_atoms, n))
    gram_c = np.zeros((n_atoms, n_atoms))  # sum_i a_i a_i^T
    cross = np.zeros((dim, n_atoms))  # sum_i p_i a_i^T
    v = rng.standard_normal(n_atoms)

    def objective():
        return lasso_objective(p, phi, codes, lam) / n

    history = [objective()]
    for epoch in range(epochs):
        used = np.zeros(n_atoms, dtype=bool)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            b = order[start:start + batch_size]
            lsq, v = _spectral_norm_sq(phi, v)
            step = 1.0 / (1.05 * lsq)
            old = codes[:, b]
            a = old.copy()
            pt = phi.T @ p[:, b]
            g = phi.T @ phi
            for _ in range(ista_iter):
                a = soft_threshold(a - step * (g @ a - pt), step * lam)
            codes[:, b] = a
            gram_c += a @ a.T - old @ old.T
            cross += p[:, b] @ (a - old).T
            used |= np.any(a != 0, axis=1)
            for j in range(n_atoms):
                if gram_c[j, j] <= 1e-14:
                    continue
                gj = cross[:, j] - phi @ gram_c[:, j] + phi[:, j] * gram_c[j, j]
                ng = np.linalg.norm(gj)
                if ng > 0:
                    phi[:, j] = gj / ng
        dead = np.flatnonzero(~used & ~np.any(codes != 0, axis=1))
        if dead.size:
            err = np.linalg.norm(p - phi @ codes, axis=0)
            worst = np.argsort(-err, kind="stable")[:dead.size]
            for j, i in zip(dead, worst):
                if err[i] > 0:
                    phi[:, j] = (p[:, i] - phi @ codes[:, i]) / err[i]
        history.append(objective())
        log.debug("epoch %d objective %.6g (%d dead atoms)", epoch, history[-1], dead.size)
    return phi, history


def _masked_objective(p, w, phi, codes, lam):
    r = w * (p - phi @ codes)
    return (0.5 * float(np.sum(r * r)) + lam * float(np.sum(np.abs(codes)))) / p.shape[1]


def _learn_masked(p, w, phi, lam, epochs, ista_iter, rng):
    """Fit ``1/2 sum_i ||w_i * (p_i - Phi a_i)||^2 + lam ||a_i||_1`` on observed entries.

    Full-batch alternation: masked ISTA on the codes, then one
    majorise-minimise step per atom.  The atom's weighted quadratic is
    bounded by an isotropic one with curvature ``max_r den_r``, whose
    minimiser on the unit sphere is a normalised vector, so the objective
    cannot increase.  Without missing entries this is the exact block update.
    """
    n_atoms = phi.shape[1]
    codes = np.zeros((n_atoms, p.shape[1]))
    v = rng.standard_normal(n_atoms)
    history = [_masked_objective(p, w, phi, codes, lam)]
    w2 = w * w
    for epoch in range(epochs):
        lsq, v = _spectral_norm_sq(phi, v)
        step = 1.0 / (1.05 * lsq)
        for _ in range(ista_iter):
            grad = phi.T @ (w2 * (phi @ codes - p))
            codes = soft_threshold(codes - step * grad, step * lam)
        resid = p - phi @ codes
        for j in range(n_atoms):
            on = np.flatnonzero(codes[j])
            if on.size == 0:
                continue
            a = codes[j, on]
            rj = resid[:, on] + np.outer(phi[:, j], a)
            wj = w2[:, on]
            den = wj @ (a * a)
            g = (wj * rj) @ a + (den.max() - den) * phi[:, j]
            ng = np.linalg.norm(g)
            if ng == 0:
                continue
            phi[:, j] = g / ng
            resid[:, on] = rj - np.outer(phi[:, j], a)
        history.append(_masked_objective(p, w, phi, codes, lam))
        log.debug("masked epoch %d objective %.6g", epoch, history[-1])
    return phi, history
