"""Self-supervised hyperspectral inpainting with low-rank and sparse priors."""

from .cube import (
    PatchLayout,
    apply_mask,
    assemble_patches,
    dematricize,
    extract_patches,
    load_cube,
    load_mask,
    matricize,
    patch_coverage,
    save_cube,
    save_mask,
)
from .diagnostics import mpsnr, mssim
from .dictionary import ista_lasso, learn_dictionary
from .solver import SolverConfig, run, run_lrs_pnp, run_lrs_pnp_dip
from .synth import SynthSpec, add_gaussian_noise, gen_lowrank_cube, gen_mask

__version__ = "0.1.0"
