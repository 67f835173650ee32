"""ADMM inpainting with low-rank and sparse priors (LRS-PnP) and its DIP variant.

The variables follow the usual scaled-ADMM split: sparse codes ``alpha``
(one column per patch), an auxiliary cube ``u`` carrying the low-rank prior,
the image ``x``, and multipliers ``lambda1`` (patch space) and ``lambda2``
(cube space) with penalties ``mu1``, ``mu2``.  One outer iteration updates
alpha, then u, then x, then the multipliers and finally the penalties.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import dip as dipmod
from .cube import (
    PatchLayout,
    assemble_patches,
    dematricize,
    extract_patches,
    matricize,
    patch_coverage,
)
from .diagnostics import mpsnr
from .operators import (
    SoftThresholdDenoiser,
    build_dsg_nlm,
    operator_norm,
    pnp_ista_step,
    svt,
)

__all__ = [
    "SolverConfig",
    "SolverState",
    "Trace",
    "VARIANTS",
    "initial_state",
    "make_denoiser",
    "alpha_update",
    "u_update_svt",
    "u_update_dip",
    "x_update",
    "multiplier_update",
    "penalty_update",
    "run",
    "run_lrs_pnp",
    "run_lrs_pnp_dip",
]

log = logging.getLogger(__name__)

VARIANTS = ("lrs-pnp", "lrs-pnp-dip", "lrs-pnp-dip-1lip")
MU_MAX = 1e6


@dataclass(frozen=True)
class SolverConfig:
    variant: str = "lrs-pnp"
    gamma: float = 0.5
    w_s: float = 0.005
    w_lr: float = 0.05
    mu1: float = 1.0
    mu2: float = 1.0
    rho1: float = 1.0
    rho2: float = 1.0
    max_outer: int = 200
    it_max: int = 10
    tol_x: float = 1e-4
    denoiser: str = "soft"  # soft | dsg-nlm
    denoise_domain: str = "code"  # code | patch
    nlm_patch_radius: int = 1
    nlm_search_radius: int = 1
    nlm_h: float = 1.0  # relative to the guide's standard deviation
    dip_inner_steps: int = 10
    dip_lr: float = 0.003
    dip_widths: tuple = (16, 32)
    dip_slope: float = 0.1
    dip_skip: bool = False
    dip_output: str = "sigmoid"  # sigmoid | linear
    wmv_window: int = 20
    wmv_patience: int = 100
    wmv_action: str = "auto"  # auto | halt | freeze
    seed: int = 0
    record_states: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.w_s < 0 or self.w_lr < 0:
            raise ValueError("w_s and w_lr must be non-negative")
        if self.mu1 <= 0 or self.mu2 <= 0:
            raise ValueError("initial penalties must be positive")
        if self.rho1 < 1 or self.rho2 < 1:
            raise ValueError("penalty growth factors must be >= 1")
        if self.denoiser not in ("soft", "dsg-nlm"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        if self.denoise_domain not in ("code", "patch"):
            raise ValueError(f"unknown denoise domain {self.denoise_domain!r}")
        if self.dip_output not in ("sigmoid", "linear"):
            raise ValueError(f"unknown DIP output layer {self.dip_output!r}")
        if self.wmv_action not in ("auto", "halt", "freeze"):
            raise ValueError(f"unknown WMV action {self.wmv_action!r}")

    @classmethod
    def preset(cls, variant, **overrides):
        """Defaults for a variant; ``lrs-pnp-dip-1lip`` pins the convergence-certified setup."""
        if variant == "lrs-pnp-dip-1lip":
            base = dict(rho1=1.0, rho2=1.0, denoiser="dsg-nlm", record_states=True)
            base.update(overrides)
            overrides = base
        return cls(variant=variant, **overrides)

    @property
    def uses_dip(self):
        return self.variant != "lrs-pnp"

    @property
    def halts_on_wmv(self):
        """Whether a WMV stop ends the outer loop (otherwise the net is frozen)."""
        if self.wmv_action == "auto":
            return self.variant == "lrs-pnp-dip"
        return self.wmv_action == "halt"

    def with_tau(self, tau):
        """Reweight the priors to sparsity/low-rank ratio `tau`.

        The ratio is measured in units of the current pair, which sits at
        ``tau = 1``: the result is ``w_s * 2 tau / (1 + tau)`` and
        ``w_lr * 2 / (1 + tau)``.  ``tau = 0`` drops the sparsity prior,
        ``tau = inf`` the low-rank one.
        """
        if tau < 0:
            raise ValueError("tau must be non-negative")
        if np.isinf(tau):
            return replace(self, w_s=2.0 * self.w_s, w_lr=0.0)
        return replace(self, w_s=self.w_s * 2.0 * tau / (1.0 + tau),
                       w_lr=self.w_lr * 2.0 / (1.0 + tau))

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class SolverState:
    x: np.ndarray
    u: np.ndarray
    alpha: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    mu1: float
    mu2: float
    iteration: int = 0


@dataclass
class Trace:
    dx: list = field(default_factory=list)
    dlambda1: list = field(default_factory=list)
    dlambda2: list = field(default_factory=list)
    mpsnr: list = field(default_factory=list)
    dip_loss: list = field(default_factory=list)
    fidelity: list = field(default_factory=list)
    nuclear: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    mu1: list = field(default_factory=list)
    mu2: list = field(default_factory=list)
    states: list = field(default_factory=list)
    lyapunov: list | None = None
    status: str = "running"
    stop_reason: str = ""
    wmv_iteration: int | None = None
    wmv_best_iteration: int | None = None

    def __len__(self):
        return len(self.dx)

    def to_csv(self, path):
        cols = ["iter", "dx", "dlambda1", "dlambda2", "mpsnr", "H", "dip_loss"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(len(self)):
                w.writerow([
                    k + 1,
                    _num(self.dx[k]),
                    _num(self.dlambda1[k]),
                    _num(self.dlambda2[k]),
                    _num(self.mpsnr[k]) if self.mpsnr else "",
                    _num(self.lyapunov[k + 1]) if self.lyapunov is not None else "",
                    _num(self.dip_loss[k]) if self.dip_loss else "",
                ])


def _num(v):
    return repr(float(v))


def initial_state(y, phi, layout, config):
    """``x = u = y``, zero codes and multipliers."""
    n_patches = layout.n_patches(y.shape)
    return SolverState(
        x=y.copy(),
        u=y.copy(),
        alpha=np.zeros((phi.shape[1], n_patches)),
        lambda1=np.zeros((layout.patch_dim, n_patches)),
        lambda2=np.zeros_like(y),
        mu1=config.mu1,
        mu2=config.mu2,
    )


class _PatchDomainDenoiser:
    """Denoise the synthesised patches, then pull the codes toward the result."""

    def __init__(self, lin, phi, phi_norm_sq):
        self.lin, self.phi, self.c = lin, phi, phi_norm_sq

    def __call__(self, v, step=None):
        p = self.phi @ v
        return v + self.phi.T @ (self.lin(p) - p) / self.c


def make_denoiser(config, phi, y, layout):
    """The sparse-coding denoiser chosen by `config`."""
    if config.denoiser == "soft":
        return SoftThresholdDenoiser(config.w_s)
    z = extract_patches(y, layout)
    if config.denoise_domain == "code":
        guide = phi.T @ z
    else:
        guide = np.mean(z, axis=1).reshape(layout.patch_rows, layout.patch_cols)
    h = config.nlm_h * max(float(np.std(guide)), 1e-12)
    lin = build_dsg_nlm(guide, config.nlm_patch_radius, config.nlm_search_radius, h)
    if config.denoise_domain == "code":
        return lin
    return _PatchDomainDenoiser(lin, phi, operator_norm(phi) ** 2)


def alpha_update(state, phi, denoiser, it_max, layout, phi_norm_sq=None):
    """`it_max` PnP-ISTA steps on the codes, target ``P x + lambda1 / mu1``."""
    if it_max == 0:
        return state.alpha
    if phi_norm_sq is None:
        phi_norm_sq = operator_norm(phi) ** 2
    beta = state.mu1 * phi_norm_sq
    z = extract_patches(state.x, layout) + state.lambda1 / state.mu1
    alpha = state.alpha
    for _ in range(it_max):
        alpha = pnp_ista_step(alpha, denoiser, phi, z, state.mu1, 1.0 / beta, beta)
    return alpha


def u_update_svt(state, w_lr):
    """Singular value thresholding of ``x + lambda2 / mu2`` with threshold ``w_lr / mu2``."""
    z = state.x + state.lambda2 / state.mu2
    return dematricize(svt(matricize(z), w_lr / state.mu2), z.shape)


def u_update_dip(state, net, adam, stopper, y, mask, inner_steps):
    """Train the DIP for up to `inner_steps` steps on input ``x + lambda2 / mu2``.

    Returns ``(u, losses)``; training is skipped once `stopper` has fired.
    """
    z = state.x + state.lambda2 / state.mu2
    losses = []
    for _ in range(inner_steps):
        if stopper is not None and stopper.stopped:
            break
        loss = dipmod.dip_train_step(net, adam, z, y, mask)
        losses.append(loss)
        if stopper is not None:
            stopper.should_stop(loss)
    u = dipmod.dip_forward(net, z)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("DIP produced non-finite output")
    return u, losses


def _x_system(state, mask, coverage, gamma):
    return gamma * mask + state.mu1 * coverage + state.mu2


def x_update(state, y, mask, phi, layout, gamma, coverage=None):
    """Closed-form x step.

    Solves ``(gamma M^T M + mu1 sum_i P_i^T P_i + mu2 I) x = gamma M^T y
    + mu1 sum_i P_i^T Phi alpha_i + mu2 u - sum_i P_i^T lambda1_i - lambda2``;
    every operator on the left is diagonal.
    """
    dims = y.shape
    if coverage is None:
        coverage = patch_coverage(layout, dims)
    mask = mask.astype(np.float64)
    diag = _x_system(state, mask, coverage, gamma)
    if np.any(diag <= 0):
        raise ZeroDivisionError("x-update system has a non-positive diagonal entry")
    rhs = (gamma * mask * y
           + assemble_patches(state.mu1 * (phi @ state.alpha) - state.lambda1, layout, dims)
           + state.mu2 * state.u - state.lambda2)
    return rhs / diag


def multiplier_update(state, phi, layout):
    """Dual ascent with the current (pre-growth) penalties."""
    r1 = extract_patches(state.x, layout) - phi @ state.alpha
    r2 = state.x - state.u
    if r2.shape != state.lambda2.shape or r1.shape != state.lambda1.shape:
        raise ValueError("residual shapes do not match the multipliers")
    return state.lambda1 + state.mu1 * r1, state.lambda2 + state.mu2 * r2


def penalty_update(mu1, mu2, rho1, rho2, mu_max=MU_MAX):
    """Geometric penalty growth, clamped at `mu_max`."""
    if rho1 < 1 or rho2 < 1:
        raise ValueError("penalty growth factors must be >= 1")
    return min(rho1 * mu1, mu_max), min(rho2 * mu2, mu_max)


def _rel(new, old):
    den = np.linalg.norm(old)
    num = np.linalg.norm(new - old)
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return float(num / den)


def run(y, mask, phi, config, layout=None, truth=None, net=None):
    """Run the variant selected by ``config.variant``; returns ``(x, trace)``.

    ``trace.status`` is ``"converged"``, ``"max_iter"`` or ``"diverged"``.
    A DIP run whose WMV stopper fires either ends there or continues with
    the network frozen, depending on ``config.wmv_action``.  Ending there is
    reported as converged with ``stop_reason == "wmv"``, and the returned
    cube is the iterate at which the windowed loss variance was smallest.
    """
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask)
    dims = y.shape
    if mask.shape != dims:
        raise ValueError(f"mask shape {mask.shape} != cube shape {dims}")
    if layout is None:
        layout = PatchLayout.per_band(dims[0], dims[1])
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[0] != layout.patch_dim:
        raise ValueError(
            f"dictionary atom dimension {phi.shape[0]} does not match "
            f"patch dimension {layout.patch_dim}"
        )
    y = np.where(mask.astype(bool), y, 0.0)
    coverage = patch_coverage(layout, dims)
    phi_norm_sq = operator_norm(phi) ** 2
    denoiser = make_denoiser(config, phi, y, layout)

    adam = stopper = None
    if config.uses_dip:
        if net is None:
            net = dipmod.DipNetwork.encoder_decoder(
                dims[2], dims[0], dims[1], config.dip_widths, config.dip_slope,
                config.dip_skip, config.seed,
                lipschitz_constrained=config.variant == "lrs-pnp-dip-1lip",
                output=config.dip_output,
            )
        adam = dipmod.AdamState(lr=config.dip_lr)
        stopper = dipmod.WmvStopper(config.wmv_window, config.wmv_patience)

    state = initial_state(y, phi, layout, config)
    trace = Trace()
    record = config.record_states or config.variant == "lrs-pnp-dip-1lip"
    if record:
        trace.states.append((state.x.copy(), state.lambda1.copy(), state.lambda2.copy()))
    best_x = None
    for k in range(config.max_outer):
        best_before = stopper.best_step if stopper is not None else -1
        try:
            state.alpha = alpha_update(state, phi, denoiser, config.it_max, layout, phi_norm_sq)
            if config.uses_dip:
                state.u, losses = u_update_dip(state, net, adam, stopper, y, mask,
                                               config.dip_inner_steps)
                trace.dip_loss.append(losses[-1] if losses else float("nan"))
            else:
                state.u = u_update_svt(state, config.w_lr)
            x_old, l1_old, l2_old = state.x, state.lambda1, state.lambda2
            state.x = x_update(state, y, mask, phi, layout, config.gamma, coverage)
            state.lambda1, state.lambda2 = multiplier_update(state, phi, layout)
        except (FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("iteration %d diverged: %s", k + 1, exc)
            trace.status = "diverged"
            trace.stop_reason = "diverged"
            break
        state.mu1, state.mu2 = penalty_update(state.mu1, state.mu2, config.rho1, config.rho2)
        state.iteration = k + 1

        finite = all(np.all(np.isfinite(a)) for a in (state.x, state.lambda1, state.lambda2))
        if not finite:
            trace.status = "diverged"
            trace.stop_reason = "diverged"
            break
        trace.dx.append(_rel(state.x, x_old))
        trace.dlambda1.append(_rel(state.lambda1, l1_old))
        trace.dlambda2.append(_rel(state.lambda2, l2_old))
        trace.mu1.append(state.mu1)
        trace.mu2.append(state.mu2)
        trace.fidelity.append(
            0.5 * config.gamma * float(np.sum((mask * (y - state.x)) ** 2)))
        trace.nuclear.append(
            config.w_lr * float(np.sum(np.linalg.svd(matricize(state.x), compute_uv=False))))
        trace.sparsity.append(config.w_s * float(np.sum(np.abs(state.alpha))))
        if truth is not None:
            trace.mpsnr.append(mpsnr(state.x, truth))
        if record:
            trace.states.append((state.x.copy(), state.lambda1.copy(), state.lambda2.copy()))
        if stopper is not None and stopper.best_step != best_before:
            best_x = state.x.copy()
            trace.wmv_best_iteration = state.iteration
        if trace.dx[-1] < config.tol_x:
            trace.status = "converged"
            trace.stop_reason = "tol_x"
            break
        if stopper is not None and stopper.stopped:
            if trace.wmv_iteration is None:
                trace.wmv_iteration = state.iteration
            if config.halts_on_wmv:
                trace.status = "converged"
                trace.stop_reason = "wmv"
                break
    else:
        trace.status = "max_iter"
        trace.stop_reason = "max_iter"
    trace.final_state = state
    trace.net = net
    if trace.stop_reason == "wmv" and best_x is not None:
        return best_x, trace
    return state.x, trace


def run_lrs_pnp(y, mask, phi, config=None, layout=None, truth=None):
    """Low-rank (SVT) plus sparse-coding ADMM."""
    config = SolverConfig() if config is None else replace(config, variant="lrs-pnp")
    return run(y, mask, phi, config, layout, truth)


def run_lrs_pnp_dip(y, mask, phi, config=None, layout=None, truth=None, net=None):
    """ADMM with the SVT step replaced by a deep image prior."""
    if config is None:
        config = SolverConfig(variant="lrs-pnp-dip")
    elif not config.uses_dip:
        config = replace(config, variant="lrs-pnp-dip")
    return run(y, mask, phi, config, layout, truth, net)
