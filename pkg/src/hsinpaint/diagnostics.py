"""Quality metrics and empirical checks of the convergence assumptions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cube import matricize

__all__ = [
    "PSNR_CAP",
    "mpsnr",
    "mssim",
    "ThetaCheck",
    "check_theta_averaged",
    "Moduli",
    "convexity_moduli",
    "LyapunovTrace",
    "lyapunov_trace",
    "singular_spectrum",
]

PSNR_CAP = 120.0


def _pair(x, truth):
    x = np.asarray(x, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if x.shape != truth.shape or x.ndim != 3:
        raise ValueError(f"shape mismatch: {x.shape} vs {truth.shape}")
    return x, truth


def mpsnr(x, truth, peak=None):
    """Band-averaged PSNR in dB; bands with MSE below 1e-12 count as `PSNR_CAP`."""
    x, truth = _pair(x, truth)
    if peak is None:
        peak = float(truth.max())
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = np.mean((x - truth) ** 2, axis=(0, 1))
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(peak**2 / mse)
    db = np.where(mse < 1e-12, PSNR_CAP, db)
    return float(np.mean(db))


def mssim(x, truth, window=8, peak=None):
    """Band-averaged SSIM over non-overlapping ``window x window`` blocks.

    Uses population statistics per block and the stabilisers
    ``C1 = (0.01 peak)^2``, ``C2 = (0.03 peak)^2``; trailing rows/columns
    that do not fill a block are ignored.
    """
    x, truth = _pair(x, truth)
    rows, cols, bands = x.shape
    if window > rows or window > cols:
        raise ValueError(f"window {window} larger than image {rows}x{cols}")
    if peak is None:
        peak = float(truth.max())
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    nr, nc = rows // window, cols // window

    def blocks(a):
        a = a[:nr * window, :nc * window]
        return a.reshape(nr, window, nc, window, bands)

    a, b = blocks(x), blocks(truth)
    ma, mb = a.mean(axis=(1, 3)), b.mean(axis=(1, 3))
    da = a - ma[:, None, :, None]
    db = b - mb[:, None, :, None]
    va = (da * da).mean(axis=(1, 3))
    vb = (db * db).mean(axis=(1, 3))
    cov = (da * db).mean(axis=(1, 3))
    ssim = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return float(np.mean(ssim))


@dataclass(frozen=True)
class ThetaCheck:
    passed: bool
    worst_margin: float  # max over pairs of lhs - rhs; <= slack means pass


def check_theta_averaged(op, theta, dim, n_pairs=100, seed=0, slack=1e-8):
    """Test ``||Tx - Ty||^2 <= ||x - y||^2 - (1-theta)/theta ||(I-T)x - (I-T)y||^2``.

    `op` maps vectors of length `dim` to vectors of length `dim`.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    c = (1.0 - theta) / theta
    worst = -np.inf
    for _ in range(n_pairs):
        x = rng.standard_normal(dim)
        y = rng.standard_normal(dim)
        tx, ty = op(x), op(y)
        d = x - y
        dt = tx - ty
        lhs = dt @ dt
        rhs = d @ d - c * np.sum((d - dt) ** 2)
        scale = max(d @ d, 1.0)
        worst = max(worst, float((lhs - rhs) / scale))
    return ThetaCheck(worst <= slack, worst)


@dataclass(frozen=True)
class Moduli:
    beta: float
    rho: float

    @property
    def contraction_condition(self):
        """Whether the strong-convexity modulus exceeds half the smoothness constant."""
        return self.rho > self.beta / 2


def convexity_moduli(phi, mu1=1.0):
    """Smoothness and strong-convexity moduli of ``mu1/2 ||z - Phi a||^2`` in ``a``."""
    phi = np.asarray(phi, dtype=np.float64)
    s = np.linalg.svd(phi, compute_uv=False)
    beta = mu1 * float(s[0]) ** 2
    if phi.shape[1] > phi.shape[0]:
        rho = 0.0  # Phi^T Phi is rank deficient
    else:
        rho = mu1 * float(s[-1]) ** 2
    return Moduli(beta, rho)


@dataclass
class LyapunovTrace:
    """Lyapunov candidate ``H^k`` measured against a reference point."""

    values: np.ndarray
    x_term: np.ndarray
    lambda1_term: np.ndarray
    lambda2_term: np.ndarray
    max_increase: float
    burn_in: int | None  # first k after which H is non-increasing within slack
    slack: float

    def monotone_after(self, k):
        return self.burn_in is not None and self.burn_in <= k


def lyapunov_trace(states, mu, reference=None, rho=(1.0, 1.0), force=False, rel_slack=1e-6):
    """``H^k = 2||x^k - x*||^2 + (||l1^k - l1*||^2 + ||l2^k - l2*||^2) / mu^2``.

    `states` is a sequence of ``(x, lambda1, lambda2)``; the last one is the
    reference unless given.  `mu` may be a pair ``(mu1, mu2)`` scaling the
    two multiplier terms separately.  Growing penalties void the monotonicity claim,
    so ``rho != 1`` is refused unless `force`.
    """
    if not states:
        raise ValueError("empty state trace")
    if len(states[0]) != 3:
        raise ValueError("trace states must carry (x, lambda1, lambda2)")
    if any(r != 1.0 for r in rho) and not force:
        raise ValueError("penalties are not fixed (rho != 1); pass force=True to compute anyway")
    mu1, mu2 = (mu, mu) if np.isscalar(mu) else mu
    xr, l1r, l2r = states[-1] if reference is None else reference
    xt = np.array([2.0 * np.sum((x - xr) ** 2) for x, _, _ in states])
    l1t = np.array([np.sum((l1 - l1r) ** 2) / mu1**2 for _, l1, _ in states])
    l2t = np.array([np.sum((l2 - l2r) ** 2) / mu2**2 for _, _, l2 in states])
    h = xt + l1t + l2t
    slack = rel_slack * float(h[0])
    inc = np.diff(h)
    max_inc = float(inc.max()) if inc.size else 0.0
    bad = np.flatnonzero(inc > slack)
    burn_in = 0 if bad.size == 0 else int(bad[-1] + 1)
    return LyapunovTrace(h, xt, l1t, l2t, max_inc, burn_in, slack)


def singular_spectrum(x):
    """Descending singular values of the ``bands x pixels`` matricization."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cube contains non-finite values")
    return np.linalg.svd(matricize(x), compute_uv=False)
