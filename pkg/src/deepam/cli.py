"""Command-line surface: dataset synthesis, training, inference, the
classic baseline, gradient checks, and solver benchmarks.

Every run resolves its options (defaults < ``--config`` file < flags) and
writes a ``config.resolved`` snapshot that reproduces the run when passed
back through ``--config``.  Exit codes: 0 success, 2 configuration error,
3 numeric failure, 4 I/O failure.  ``DEEPAM_THREADS`` caps the BLAS worker
count (applied before numpy loads).
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, Opt, resolve, write_resolved

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

IMAGE_EXTS = (".pgm", ".pfm", ".png")


def _apply_thread_cap():
    cap = os.environ.get("DEEPAM_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


def _atomic_text(path, text: str):
    tmp = str(path) + ".partial"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_call(path, writer):
    """Run `writer(tmp_path)` then move the result into place."""
    tmp = str(path) + ".partial"
    writer(tmp)
    os.replace(tmp, path)


def _save_image_atomic(img, path):
    import numpy as np

    from .fileio import _SAVERS, ImageFormatError

    ext = os.path.splitext(str(path))[1].lower()
    saver = _SAVERS.get(ext)
    if saver is None:
        raise ImageFormatError(f"unsupported output extension {ext!r}")
    _atomic_call(path, lambda tmp: saver(np.asarray(img), tmp))


def _derived_seed(seed: int, index: int) -> int:
    return (seed * 1000003 + index) % (2**31 - 1)


def _metric_csv(rows) -> str:
    lines = ["image,psnr,ssim,bmp"]
    for name, rep in rows:
        bmp = "" if rep.bmp is None else repr(rep.bmp)
        lines.append(f"{name},{repr(rep.psnr)},{repr(rep.ssim)},{bmp}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

SYNTH_OPTS = [
    Opt("in_dir", str, None, "directory of clean images", required=True),
    Opt("out_dir", str, None, "output directory", required=True),
    Opt("sigma", float, 25.0, "noise standard deviation"),
    Opt("seed", int, 0),
    Opt("task", str, "denoise", choices=("denoise", "sr-depth")),
    Opt("factor", int, 4, "downsampling factor for sr-depth"),
    Opt("patch_size", int, 32),
    Opt("patch_count", int, 5000),
    Opt("guide_suffix", str, ".guide", "stem suffix marking guidance images"),
]


def cmd_synth(o):
    import numpy as np

    from .data import sr_input
    from .fileio import load_image, save_pfm
    from .images import NoiseSpec, add_gaussian_noise
    from .patches import sample_patches

    in_dir, out_dir = o["in_dir"], o["out_dir"]
    names = sorted(
        f
        for f in os.listdir(in_dir)
        if f.lower().endswith(IMAGE_EXTS)
        and not os.path.splitext(f)[0].endswith(o["guide_suffix"])
    )
    if not names:
        raise ConfigError(f"no input images in {in_dir}")
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("clean", "degraded") + (("guidance",) if o["task"] == "sr-depth" else ()):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    failures = []
    groups = []
    for i, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        try:
            clean = load_image(os.path.join(in_dir, name))
            if clean.ndim != 2:
                raise ValueError("multi-channel inputs are not supported here")
            guide = None
            if o["task"] == "sr-depth":
                gname = None
                for ext in IMAGE_EXTS:
                    cand = os.path.join(in_dir, stem + o["guide_suffix"] + ext)
                    if os.path.exists(cand):
                        gname = cand
                        break
                if gname is None:
                    raise FileNotFoundError(f"no guidance image for {name}")
                guide = load_image(gname)
                degraded = sr_input(clean, o["factor"])
                if o["sigma"] > 0:
                    degraded = add_gaussian_noise(
                        degraded, NoiseSpec(o["sigma"], _derived_seed(o["seed"], i))
                    )
            else:
                degraded = add_gaussian_noise(
                    clean, NoiseSpec(o["sigma"], _derived_seed(o["seed"], i))
                )
        except Exception as e:  # noqa: BLE001 - collected and reported below
            failures.append(f"{name}: {e}")
            continue
        _atomic_call(
            os.path.join(out_dir, "clean", stem + ".pfm"), lambda t, a=clean: save_pfm(a, t)
        )
        _atomic_call(
            os.path.join(out_dir, "degraded", stem + ".pfm"),
            lambda t, a=degraded: save_pfm(a, t),
        )
        if guide is not None:
            _atomic_call(
                os.path.join(out_dir, "guidance", stem + ".pfm"),
                lambda t, a=guide: save_pfm(a, t),
            )
        groups.append((degraded, guide, clean) if guide is not None else (degraded, clean))

    if failures:
        for f in failures:
            print(f"unreadable input: {f}", file=sys.stderr)
        return EXIT_IO
    patches = sample_patches(groups, o["patch_size"], o["patch_count"], o["seed"])
    _atomic_call(os.path.join(out_dir, "train.damp"), patches.save)
    write_resolved(os.path.join(out_dir, "config.resolved"), "synth", o)
    print(f"wrote {len(groups)} triplets and {patches.count} patches to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_OPTS = [
    Opt("data", str, None, "PatchSet (.damp) path", required=True),
    Opt("out_dir", str, None, "run directory", required=True),
    Opt("task", str, "denoise", choices=("denoise", "joint")),
    Opt("k", int, 2),
    Opt("depth", int, 6),
    Opt("width", int, 16),
    Opt("epochs", int, 20),
    Opt("lr", float, 1e-4),
    Opt("lr_decay", float, 0.5),
    Opt("lr_decay_every", int, 5),
    Opt("momentum", float, 0.9),
    Opt("weight_decay", float, 0.0005),
    Opt("batch", int, 32),
    Opt("seed", int, 0),
    Opt("val_fraction", float, 0.1),
    Opt("sr_factor", int, 0, "metadata recorded in the checkpoint"),
    Opt("solver_tol", float, 1e-6),
    Opt("solver_max_iter", int, 100),
    Opt("backward_max_iter", int, 10),
    Opt("resume", str, "", "training-state file to continue from"),
]


def cmd_train(o):
    import numpy as np

    from .checkpoint import save_checkpoint
    from .images import psnr, ssim
    from .model import CascadeModel, ModelConfig
    from .nn import SGDConfig
    from .patches import PatchSet
    from .solver import SolverConfig
    from .train import TrainRun, evaluate_psnr, load_train_state, save_train_state, train

    out_dir = o["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    patches = PatchSet.load(o["data"])

    guide_channels = patches.arity - 2
    if o["task"] == "denoise" and guide_channels != 0:
        raise ConfigError(f"denoise training expects arity 2, got {patches.arity}")
    if o["task"] == "joint" and guide_channels < 1:
        raise ConfigError(f"joint training expects arity >= 3, got {patches.arity}")

    order = np.random.default_rng((o["seed"], 555)).permutation(patches.count)
    n_val = max(1, int(round(o["val_fraction"] * patches.count))) if o["val_fraction"] > 0 else 0
    val = PatchSet(data=patches.data[order[:n_val]]) if n_val else None
    tr = PatchSet(data=patches.data[order[n_val:]])

    if o["resume"]:
        model, run = load_train_state(o["resume"])
        start_epoch = run.epochs_run
    else:
        cfg = ModelConfig(
            task=o["task"],
            k=o["k"],
            depth=o["depth"],
            width=o["width"],
            guide_channels=guide_channels,
            sr_factor=o["sr_factor"],
        )
        model = CascadeModel(cfg, seed=o["seed"])
        run = TrainRun(seed=o["seed"])
        start_epoch = 0

    sgd = SGDConfig(
        lr=o["lr"],
        momentum=o["momentum"],
        weight_decay=o["weight_decay"],
        batch_size=o["batch"],
        epochs=o["epochs"],
        lr_decay=o["lr_decay"],
        lr_decay_every=o["lr_decay_every"],
    )
    solver_cfg = SolverConfig(
        tol=o["solver_tol"],
        max_iter=o["solver_max_iter"],
        backward_max_iter=o["backward_max_iter"],
    )

    def on_epoch_end(epoch, m, r):
        _atomic_call(os.path.join(out_dir, f"model_epoch{epoch:03d}.damw"),
                     lambda t: save_checkpoint(m, t))
        _atomic_call(os.path.join(out_dir, "train_state.npz"),
                     lambda t: save_train_state(t, m, r))
        _atomic_call(os.path.join(out_dir, "loss_log.csv"), r.write_loss_csv)
        _atomic_call(os.path.join(out_dir, "eval_log.csv"), r.write_eval_csv)
        if r.eval_log:
            print(f"epoch {epoch}: loss {r.epoch_losses[-1]:.4f} "
                  f"val psnr {r.eval_log[-1][1]:.3f}")
        else:
            print(f"epoch {epoch}: loss {r.epoch_losses[-1]:.4f}")

    write_resolved(os.path.join(out_dir, "config.resolved"), "train", o)
    run = train(
        model,
        tr,
        sgd,
        solver_cfg,
        seed=o["seed"],
        val_patches=val,
        start_epoch=start_epoch,
        run=run,
        on_epoch_end=on_epoch_end,
    )
    _atomic_call(os.path.join(out_dir, "model.damw"), lambda t: save_checkpoint(model, t))
    _atomic_call(os.path.join(out_dir, "loss_log.csv"), run.write_loss_csv)
    _atomic_call(os.path.join(out_dir, "eval_log.csv"), run.write_eval_csv)

    if val is not None:
        from .images import MetricReport

        rows = []
        for i in range(val.count):
            f = val.data[i, 0:1][None]
            g = val.data[i, 1:-1][None] if guide_channels else None
            t = val.data[i, -1]
            u, _ = model.forward(f, g, train=False, solver_cfg=solver_cfg)
            rows.append(
                (f"val{i:04d}", MetricReport(psnr=psnr(u[0, 0], t), ssim=ssim(u[0, 0], t)))
            )
        _atomic_text(os.path.join(out_dir, "metrics.csv"), _metric_csv(rows))
    print(f"finished {run.epochs_run} epochs; model at {os.path.join(out_dir, 'model.damw')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# denoise / srdepth
# ---------------------------------------------------------------------------

DENOISE_OPTS = [
    Opt("model", str, None, "checkpoint (.damw)", required=True),
    Opt("in_img", str, None, "degraded input image", required=True),
    Opt("out_img", str, None, "restored output image", required=True),
    Opt("truth", str, "", "ground truth for the metric report"),
    Opt("report", str, "", "metric CSV path"),
]

SRDEPTH_OPTS = DENOISE_OPTS + [
    Opt("guide", str, None, "high-resolution guidance image", required=True),
    Opt("factor", int, 0, "upsample the input by this factor first (0 = already upsampled)"),
    Opt("delta", float, 3.0, "bad-pixel threshold for the report"),
]


def _run_restore(o, joint: bool):
    from .checkpoint import load_checkpoint
    from .fileio import load_image
    from .images import metric_report, resample

    model = load_checkpoint(o["model"])
    want = "joint" if joint else "denoise"
    if model.config.task != want:
        raise ConfigError(
            f"checkpoint task {model.config.task!r} does not match the {want!r} command"
        )
    f = load_image(o["in_img"])
    g = None
    if joint:
        if o["factor"] and o["factor"] > 1:
            f = resample(f, o["factor"], "bilinear-up")
        g = load_image(o["guide"])
        gdims = g.shape[-2:]
        if gdims != f.shape[-2:]:
            raise ConfigError(f"guidance {gdims} does not match input grid {f.shape[-2:]}")
    out = model.infer(f, g)
    _save_image_atomic(out, o["out_img"])
    write_resolved(str(o["out_img"]) + ".config.resolved", "srdepth" if joint else "denoise", o)
    if o["truth"]:
        truth = load_image(o["truth"])
        rep = metric_report(out, truth, with_bmp=joint, delta=o.get("delta", 3.0))
        if o["report"]:
            _atomic_text(o["report"], _metric_csv([(os.path.basename(o["in_img"]), rep)]))
        bmp_part = "" if rep.bmp is None else f" bmp {rep.bmp:.3f}%"
        print(f"psnr {rep.psnr:.3f} dB ssim {rep.ssim:.4f}{bmp_part}")
    return EXIT_OK


def cmd_denoise(o):
    return _run_restore(o, joint=False)


def cmd_srdepth(o):
    return _run_restore(o, joint=True)


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

BASELINE_OPTS = [
    Opt("in_img", str, None, "degraded input image", required=True),
    Opt("out_img", str, None, "restored output image", required=True),
    Opt("reg", str, "l1", choices=("l1", "l0", "lp")),
    Opt("p", float, 0.5, "exponent for the lp regularizer"),
    Opt("lam", float, 5.0, "data-term weight"),
    Opt("schedule", str, "", "beta0,alpha,betamax (default: 2*lam,2,256*lam)"),
    Opt("backend", str, "fft", choices=("fft", "pcg")),
    Opt("trace", str, "", "write the continuation trace CSV here"),
]


def cmd_baseline(o):
    from .classic import ContinuationSchedule, Regularizer, am_solve
    from .fileio import load_image

    reg = Regularizer(kind=o["reg"], p=o["p"] if o["reg"] == "lp" else 1.0)
    if o["schedule"]:
        parts = o["schedule"].split(",")
        if len(parts) != 3:
            raise ConfigError("schedule must be 'beta0,alpha,betamax'")
        try:
            beta0, alpha, beta_max = (float(x) for x in parts)
        except ValueError as e:
            raise ConfigError(f"bad schedule {o['schedule']!r}") from e
        try:
            sched = ContinuationSchedule(beta0=beta0, alpha=alpha, beta_max=beta_max, lam=o["lam"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
    else:
        sched = ContinuationSchedule.default(o["lam"])
    f = load_image(o["in_img"])
    u, trace = am_solve(f, reg, sched, backend=o["backend"])
    _save_image_atomic(u, o["out_img"])
    write_resolved(str(o["out_img"]) + ".config.resolved", "baseline", o)
    if o["trace"]:
        _atomic_call(o["trace"], trace.to_csv)
    print(f"{len(trace.records)} continuation rounds; final gap {trace.records[-1].gap:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_OPTS = [
    Opt("scale", str, "tiny", choices=("tiny", "small")),
    Opt("seed", int, 0),
    Opt("out_dir", str, "", "optionally write config.resolved and report.txt here"),
]


def cmd_gradcheck(o):
    from .verify import run_suite

    report = run_suite(scale=o["scale"], seed=o["seed"])
    text = "\n".join(report.lines())
    print(text)
    if o["out_dir"]:
        os.makedirs(o["out_dir"], exist_ok=True)
        write_resolved(os.path.join(o["out_dir"], "config.resolved"), "gradcheck", o)
        _atomic_text(os.path.join(o["out_dir"], "report.txt"), text + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# bench-solver
# ---------------------------------------------------------------------------

BENCH_OPTS = [
    Opt("size", str, "64x64", "grid as HxW"),
    Opt("trials", int, 20),
    Opt("seed", int, 0),
    Opt("out_dir", str, None, required=True),
    Opt("tol", float, 1e-5),
    Opt("max_iter", int, 100),
]


def cmd_bench_solver(o):
    import time

    import numpy as np
    import scipy.linalg as sla

    from .solver import factorize, pcg_solve

    try:
        h, w = (int(x) for x in o["size"].lower().split("x"))
    except ValueError as e:
        raise ConfigError(f"bad size {o['size']!r}, expected HxW") from e
    if h < 1 or w < 1 or h * w > 128 * 128:
        raise ConfigError("size must be between 1x1 and 128x128")
    os.makedirs(o["out_dir"], exist_ok=True)
    rng = np.random.default_rng(o["seed"])
    bench_rows = ["trial,n,iterations,converged,final_relres,direct_agreement"]
    res_rows = ["trial,iteration,relres"]
    time_rows = ["trial,pcg_seconds,direct_seconds"]
    for trial in range(o["trials"]):
        gamma = rng.uniform(0.1, 10.0, size=(h, w))
        b = rng.normal(size=(h, w))
        t0 = time.perf_counter()
        system = factorize(gamma)
        x, rep = pcg_solve(system.L, system.M, b, tol=o["tol"], max_iter=o["max_iter"])
        t_pcg = time.perf_counter() - t0
        t0 = time.perf_counter()
        direct = sla.solveh_banded(system.L.to_banded_lower(), b.ravel(), lower=True)
        t_direct = time.perf_counter() - t0
        agreement = float(
            np.linalg.norm(x.ravel() - direct) / max(np.linalg.norm(direct), 1e-300)
        )
        bench_rows.append(
            f"{trial},{h * w},{rep.iterations},{int(rep.converged)},"
            f"{repr(rep.relative_residual)},{repr(agreement)}"
        )
        for i, r in enumerate(rep.history, start=1):
            res_rows.append(f"{trial},{i},{repr(r)}")
        time_rows.append(f"{trial},{t_pcg:.6f},{t_direct:.6f}")
    _atomic_text(os.path.join(o["out_dir"], "bench.csv"), "\n".join(bench_rows) + "\n")
    _atomic_text(os.path.join(o["out_dir"], "residuals.csv"), "\n".join(res_rows) + "\n")
    # timings are inherently non-reproducible and live in their own file
    _atomic_text(os.path.join(o["out_dir"], "timing.csv"), "\n".join(time_rows) + "\n")
    write_resolved(os.path.join(o["out_dir"], "config.resolved"), "bench-solver", o)
    print(f"{o['trials']} trials on {h}x{w}; results in {o['out_dir']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": (SYNTH_OPTS, cmd_synth, "degrade clean images and build a training PatchSet"),
    "train": (TRAIN_OPTS, cmd_train, "train a cascade on a PatchSet"),
    "denoise": (DENOISE_OPTS, cmd_denoise, "restore a single image with a trained model"),
    "srdepth": (SRDEPTH_OPTS, cmd_srdepth, "guided depth upsampling with a joint model"),
    "baseline": (BASELINE_OPTS, cmd_baseline, "classic proximal alternating minimization"),
    "gradcheck": (GRADCHECK_OPTS, cmd_gradcheck, "finite-difference gradient verification"),
    "bench-solver": (BENCH_OPTS, cmd_bench_solver, "PCG vs direct-solve benchmark"),
}

# flags whose option name differs from --in/--out style aliases
_ALIASES = {
    "in_dir": "--in",
    "out_dir": "--out",
    "in_img": "--in",
    "out_img": "--out",
    "lam": "--lambda",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="deepam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (schema, func, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="key = value config file")
        for opt in schema:
            flags = [_ALIASES[opt.name], opt.flag] if opt.name in _ALIASES else [opt.flag]
            p.add_argument(
                *flags,
                dest=opt.name,
                type=opt.type,
                default=argparse.SUPPRESS,
                choices=opt.choices or None,
                help=opt.help,
            )
        p.set_defaults(_schema=schema, _func=func, _name=name)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    provided = {
        k: v
        for k, v in vars(args).items()
        if not k.startswith("_") and k not in ("command", "config")
    }
    try:
        resolved = resolve(args._name, args._schema, provided, args.config)
        return args._func(resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _numeric_errors() as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except _io_errors() as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO


def _numeric_errors():
    from .classic import ProxError
    from .model import CascadeError
    from .nn import TrainingError
    from .solver import SolverError

    return (SolverError, TrainingError, CascadeError, ProxError)


def _io_errors():
    from .checkpoint import CheckpointError
    from .fileio import ImageFormatError
    from .patches import PatchFormatError

    return (OSError, ImageFormatError, PatchFormatError, CheckpointError)


if __name__ == "__main__":
    sys.exit(main())
