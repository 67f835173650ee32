"""Command-line entry point: ``hsinpaint <synth|learn-dict|inpaint|diagnose|metrics>``.

Every command reads an optional plain-text ``key = value`` config file
(``--config``) and then ``--key=value`` overrides, which win.  Unknown keys
are rejected.  Commands that write files also write ``manifest.txt``, which is
itself a valid config: ``hsinpaint inpaint --config out/manifest.txt`` repeats
the run exactly.

Exit codes: 0 success (``inpaint``: converged), 1 runtime or I/O error,
2 ``inpaint`` stopped at the iteration limit, 3 ``inpaint`` diverged,
64 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import dip as dipmod
from .cube import (
    PatchLayout,
    export_band_pgm,
    load_cube,
    load_mask,
    load_matrix,
    save_cube,
    save_mask,
    save_matrix,
)
from .diagnostics import (
    check_theta_averaged,
    convexity_moduli,
    lyapunov_trace,
    mpsnr,
    mssim,
    singular_spectrum,
)
from .dictionary import default_n_atoms, learn_dictionary, training_patches, training_weights
from .solver import SolverConfig, make_denoiser, run
from .synth import SynthSpec, centered_region, gen_lowrank_cube, gen_mask, observe

log = logging.getLogger("hsinpaint")

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2, 3, 64
STATUS_EXIT = {"converged": EXIT_OK, "max_iter": EXIT_MAX_ITER, "diverged": EXIT_DIVERGED}


class UsageError(Exception):
    pass


# -- key schemas --------------------------------------------------------------

_SOLVER_KEYS = {f.name: f.default for f in dataclasses.fields(SolverConfig)}
# "auto" resolves to the certified DSG-NLM denoiser for lrs-pnp-dip-1lip, soft otherwise
_SOLVER_KEYS["denoiser"] = "auto"
_LAYOUT_KEYS = {"layout": "per-band", "patch": 8, "stride": 4}

SCHEMAS = {
    "synth": {
        "out": "synth_out", "rows": 32, "cols": 32, "bands": 16, "rank": 4,
        "smoothness": 4.0, "sigma": 0.12, "mask": "dead-region", "fraction": 0.1,
        "seed": 0,
    },
    "learn-dict": {
        "input": None, "mask": "", "out": "dictionary.hsic", "atoms": 0,
        "epochs": 10, "sparsity": 0.0, "seed": 0, **_LAYOUT_KEYS,
    },
    "inpaint": {
        "input": None, "mask": None, "dict": None, "truth": "", "out": "inpaint_out",
        **_LAYOUT_KEYS, **_SOLVER_KEYS,
    },
    "diagnose": {
        "input": None, "mask": None, "dict": None, "out": "diagnose_out", "cube": "",
        "trace": "", "lipschitz_steps": 50, "pairs": 100, **_LAYOUT_KEYS, **_SOLVER_KEYS,
    },
    "metrics": {"estimate": None, "reference": None, "out": ""},
}


def _coerce(key, raw, default):
    if default is None or isinstance(default, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    raise UsageError(f"unsupported key type for {key}")


def read_config_file(path):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command, config_path=None, overrides=()):
    """Merge defaults, config file and ``--key=value`` overrides for `command`."""
    schema = SCHEMAS[command]
    raw = read_config_file(config_path) if config_path else {}
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"expected --key=value, got {item!r}")
        k, v = item[2:].split("=", 1)
        raw[k.replace("-", "_")] = v
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for k, default in schema.items():
        cfg[k] = _coerce(k, raw[k], default) if k in raw else default
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise UsageError(f"missing required key(s): {', '.join(missing)}")
    return cfg


def _format(v):
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, cfg, inputs=(), outputs=(), notes=()):
    """Resolved config plus provenance comments (versions, hashes, config hash)."""
    body = "".join(f"{k} = {_format(v)}\n" for k, v in cfg.items())
    lines = [
        f"# command: {command}",
        f"# hsinpaint {__version__}, numpy {np.__version__}, scipy {scipy.__version__}, "
        f"python {platform.python_version()}",
        f"# config sha256: {hashlib.sha256(body.encode()).hexdigest()}",
        *(f"# {n}" for n in notes),
    ]
    for label, files in (("input", inputs), ("output", outputs)):
        for f in files:
            if f and Path(f).exists():
                lines.append(f"# {label} sha256 {_sha256(f)}  {f}")
    Path(path).write_text("\n".join(lines) + "\n" + body)


def _layout(cfg, dims):
    if cfg["layout"] == "per-band":
        lay = PatchLayout.per_band(dims[0], dims[1])
    elif cfg["layout"] == "sliding":
        lay = PatchLayout.sliding(cfg["patch"], cfg["stride"])
    else:
        raise UsageError(f"layout must be per-band or sliding, got {cfg['layout']!r}")
    lay.validate(dims)
    return lay


def _solver_config(cfg):
    kw = {k: cfg[k] for k in _SOLVER_KEYS}
    certified = kw["variant"] == "lrs-pnp-dip-1lip"
    if kw["denoiser"] == "auto":
        kw["denoiser"] = "dsg-nlm" if certified else "soft"
    if certified and (kw["rho1"] != 1.0 or kw["rho2"] != 1.0):
        raise UsageError("lrs-pnp-dip-1lip needs fixed penalties (rho1 = rho2 = 1)")
    try:
        return SolverConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _abs(cfg, keys):
    for k in keys:
        if cfg.get(k):
            cfg[k] = str(Path(cfg[k]).resolve())


def _outdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")
    return Path(path)


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg):
    if not 0.0 <= cfg["fraction"] < 1.0:
        raise UsageError(f"fraction must lie in [0, 1), got {cfg['fraction']}")
    if cfg["mask"] not in ("dead-region", "random-pixels"):
        raise UsageError(f"mask must be dead-region or random-pixels, got {cfg['mask']!r}")
    try:
        spec = SynthSpec(cfg["rows"], cfg["cols"], cfg["bands"], cfg["rank"],
                         cfg["smoothness"], cfg["seed"], cfg["sigma"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(cfg["out"])
    cfg["out"] = str(out.resolve())
    mask_seed, noise_seed = (int(s) for s in np.random.SeedSequence(cfg["seed"]).generate_state(2))
    clean = gen_lowrank_cube(spec)
    if cfg["mask"] == "dead-region":
        mask = gen_mask(spec.dims, "dead-region", region=centered_region(spec.dims, cfg["fraction"]))
    else:
        mask = gen_mask(spec.dims, "random-pixels", fraction=cfg["fraction"], seed=mask_seed)
    y = observe(clean, mask, cfg["sigma"], noise_seed)
    files = [out / "clean.hsic", out / "mask.mask", out / "observed.hsic"]
    save_cube(clean, files[0], double=True)
    save_mask(mask, files[1])
    save_cube(y, files[2], double=True)
    write_manifest(out / "manifest.txt", "synth", cfg, outputs=files,
                   notes=[f"derived seeds: cube {spec.seed}, mask {mask_seed}, noise {noise_seed}"])
    print(f"wrote {', '.join(str(f) for f in files)}")
    print(f"observed MPSNR {mpsnr(y, clean):.4f} dB")
    return EXIT_OK


def cmd_learn_dict(cfg):
    _abs(cfg, ["input", "mask", "out"])
    y = load_cube(cfg["input"])
    mask = load_mask(cfg["mask"]) if cfg["mask"] else np.ones(y.shape, dtype=np.uint8)
    if mask.shape != y.shape:
        raise ValueError(f"mask shape {mask.shape} != cube shape {y.shape}")
    layout = _layout(cfg, y.shape)
    n_atoms = cfg["atoms"] or default_n_atoms(layout.patch_dim)
    patches = training_patches(y, mask, layout)
    weights = training_weights(mask, layout)
    phi, history = learn_dictionary(patches, n_atoms, cfg["sparsity"] or None,
                                    epochs=cfg["epochs"], seed=cfg["seed"], weights=weights)
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_matrix(phi, cfg["out"])
    write_manifest(Path(cfg["out"]).with_suffix(".manifest.txt"), "learn-dict", cfg,
                   inputs=[cfg["input"], cfg["mask"]], outputs=[cfg["out"]])
    print(f"dictionary {phi.shape[0]}x{phi.shape[1]} from {patches.shape[1]} patches"
          + (" (masked fit)" if weights is not None else ""))
    print(f"final training objective {history[-1]:.6g}")
    return EXIT_OK


def _load_problem(cfg):
    y = load_cube(cfg["input"])
    mask = load_mask(cfg["mask"])
    phi = load_matrix(cfg["dict"])
    if mask.shape != y.shape:
        raise ValueError(f"mask shape {mask.shape} != cube shape {y.shape}")
    layout = _layout(cfg, y.shape)
    if phi.shape[0] != layout.patch_dim:
        raise ValueError(
            f"dictionary atom dimension {phi.shape[0]} does not match "
            f"patch dimension {layout.patch_dim}"
        )
    return y, mask, phi, layout


def cmd_inpaint(cfg):
    _abs(cfg, ["input", "mask", "dict", "truth", "out"])
    config = _solver_config(cfg)
    y, mask, phi, layout = _load_problem(cfg)
    truth = load_cube(cfg["truth"]) if cfg["truth"] else None
    out = _outdir(cfg["out"])
    # the manifest goes first so a crashed run can still be repeated
    write_manifest(out / "manifest.txt", "inpaint", cfg,
                   inputs=[cfg["input"], cfg["mask"], cfg["dict"], cfg["truth"]])
    x, trace = run(y, mask, phi, config, layout, truth)
    if config.variant == "lrs-pnp-dip-1lip" and trace.states:
        lt = lyapunov_trace(trace.states, (config.mu1, config.mu2))
        trace.lyapunov = list(lt.values)
        print(f"H burn-in {lt.burn_in}, largest increase {lt.max_increase:.3g}")
    save_cube(x, out / "inpainted.hsic", double=True)
    trace.to_csv(out / "trace.csv")
    for b in sorted({0, y.shape[2] // 2, y.shape[2] - 1}):
        export_band_pgm(x, b, out / f"band_{b:03d}.pgm")
    print(f"status {trace.status} ({trace.stop_reason}) after {len(trace)} iterations")
    if truth is not None:
        p, s = mpsnr(x, truth), mssim(x, truth)
        (out / "metrics.txt").write_text(f"mpsnr = {p!r}\nmssim = {s!r}\n")
        print(f"MPSNR {p:.4f} dB  MSSIM {s:.4f}")
    write_manifest(out / "manifest.txt", "inpaint", cfg,
                   inputs=[cfg["input"], cfg["mask"], cfg["dict"], cfg["truth"]],
                   outputs=[out / "inpainted.hsic"])
    return STATUS_EXIT[trace.status]


def _line(report, ok, name, detail):
    text = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    report.append(text)
    print(text)


def cmd_diagnose(cfg):
    _abs(cfg, ["input", "mask", "dict", "cube", "trace", "out"])
    config = _solver_config(cfg)
    y, mask, phi, layout = _load_problem(cfg)
    out = _outdir(cfg["out"])
    report = []

    if config.denoiser == "dsg-nlm":
        den = make_denoiser(config, phi, np.where(mask.astype(bool), y, 0.0), layout)
        dim = phi.shape[1] * layout.n_patches(y.shape) if config.denoise_domain == "code" \
            else phi.shape[1]
        shape = (phi.shape[1], layout.n_patches(y.shape)) if config.denoise_domain == "code" \
            else (phi.shape[1],)
        chk = check_theta_averaged(lambda v: den(v.reshape(shape)).ravel(), 0.5, dim,
                                   n_pairs=cfg["pairs"], seed=config.seed)
        _line(report, chk.passed, "denoiser 1/2-averaged",
              f"worst margin {chk.worst_margin:.3g} over {cfg['pairs']} pairs")
    else:
        report.append("INFO  denoiser: soft threshold (proximal map, 1/2-averaged)")
        print(report[-1])

    m = convexity_moduli(phi, config.mu1)
    report.append(f"INFO  smoothness beta = {m.beta:.6g}")
    print(report[-1])
    _line(report, m.contraction_condition, "strong convexity rho > beta/2",
          f"rho = {m.rho:.6g}" + (" (overcomplete dictionary)" if phi.shape[1] > phi.shape[0] else ""))

    _line(report, config.rho1 == 1.0 and config.rho2 == 1.0, "fixed penalties",
          f"rho1 = {config.rho1}, rho2 = {config.rho2}")

    if config.uses_dip:
        constrained = config.variant == "lrs-pnp-dip-1lip"
        net = dipmod.DipNetwork.encoder_decoder(
            y.shape[2], y.shape[0], y.shape[1], config.dip_widths, config.dip_slope,
            config.dip_skip, config.seed, lipschitz_constrained=constrained,
            output=config.dip_output)
        adam = dipmod.AdamState(lr=config.dip_lr)
        z = np.where(mask.astype(bool), y, 0.0)
        worst = dipmod.estimate_lipschitz(net, cfg["pairs"], config.seed)
        for _ in range(cfg["lipschitz_steps"]):
            dipmod.dip_train_step(net, adam, z, z, mask)
        worst = max(worst, dipmod.estimate_lipschitz(net, cfg["pairs"], config.seed))
        _line(report, worst <= 1 + 1e-2, "DIP 1-Lipschitz",
              f"largest estimate {worst:.4f} over {cfg['lipschitz_steps']} training steps")

    if cfg["trace"]:
        import csv
        with open(cfg["trace"]) as fh:
            hs = [float(r["H"]) for r in csv.DictReader(fh) if r.get("H")]
        if hs:
            h = np.array(hs)
            slack = 1e-6 * h[0]
            bad = np.flatnonzero(np.diff(h) > slack)
            burn = 0 if bad.size == 0 else int(bad[-1] + 1)
            _line(report, burn <= 10, "Lyapunov non-increasing after burn-in <= 10",
                  f"burn-in {burn}, largest increase {np.diff(h).max() if h.size > 1 else 0:.3g}")
        else:
            report.append("INFO  trace has no H column (not a certified run)")
            print(report[-1])

    cubes = {"observed": y}
    if cfg["cube"]:
        cubes["reconstruction"] = load_cube(cfg["cube"])
    spectra = {k: singular_spectrum(v) for k, v in cubes.items()}
    with open(out / "spectrum.csv", "w") as fh:
        fh.write("index," + ",".join(spectra) + "\n")
        for i in range(y.shape[2]):
            fh.write(f"{i}," + ",".join(repr(float(s[i])) for s in spectra.values()) + "\n")
    (out / "report.txt").write_text("\n".join(report) + "\n")
    write_manifest(out / "manifest.txt", "diagnose", cfg)
    return EXIT_OK


def cmd_metrics(cfg):
    est, ref = load_cube(cfg["estimate"]), load_cube(cfg["reference"])
    p, s = mpsnr(est, ref), mssim(est, ref)
    text = f"mpsnr = {p!r}\nmssim = {s!r}\n"
    print(f"MPSNR {p:.4f} dB  MSSIM {s:.6f}")
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic low-rank cube, mask and noisy observation"),
    "learn-dict": (cmd_learn_dict, "learn a patch dictionary from a corrupted cube"),
    "inpaint": (cmd_inpaint, "run an inpainting solver"),
    "diagnose": (cmd_diagnose, "check convergence assumptions and export singular spectra"),
    "metrics": (cmd_metrics, "compare an estimate with a reference cube"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="hsinpaint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_,
                           description=f"{help_}. Keys: " + ", ".join(SCHEMAS[name]))
        p.add_argument("--config", help="key = value file; later --key=value overrides win")
    return parser


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = resolve(args.command, args.config, rest)
        return func(cfg)
    except UsageError as exc:
        print(f"hsinpaint {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"hsinpaint {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
