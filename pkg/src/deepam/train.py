"""End-to-end training of the cascade on patch sets.

SGD over shuffled minibatches with the mean-absolute-error loss at the
final reconstruction.  All randomness derives from (seed, epoch), so runs
are bit-reproducible and a run resumed from the training-state file
continues exactly where it left off.  Model checkpoints (``.damw``) store
float32 planes for interchange; the training state keeps float64 values
plus momentum so resuming is exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .images import psnr
from .model import CascadeError, CascadeModel, ModelConfig
from .nn import SGDConfig, TrainingError, l1_loss, sgd_step
from .patches import PatchSet
from .solver import SolverConfig


@dataclass
class TrainRun:
    seed: int
    epochs_run: int = 0
    step_log: list = field(default_factory=list)  # (epoch, step, lr, loss)
    epoch_losses: list = field(default_factory=list)
    eval_log: list = field(default_factory=list)  # (epoch, mean val psnr)
    diverged: bool = False

    def losses(self):
        return [row[3] for row in self.step_log]

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("epoch,step,lr,loss\n")
            for epoch, step, lr, loss in self.step_log:
                f.write(f"{epoch},{step},{repr(lr)},{repr(loss)}\n")

    def write_eval_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write("epoch,val_psnr\n")
            for epoch, val in self.eval_log:
                f.write(f"{epoch},{repr(val)}\n")


def split_batches(count: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng((seed, epoch)).permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def _unpack(patches: PatchSet, idx):
    data = patches.data[idx]
    f = data[:, 0:1]
    t = data[:, -1:]
    g = data[:, 1:-1] if patches.arity > 2 else None
    return f, g, t


def evaluate_psnr(model: CascadeModel, patches: PatchSet, solver_cfg, limit=None) -> float:
    """Mean PSNR of eval-mode restorations over a patch set."""
    n = patches.count if limit is None else min(limit, patches.count)
    vals = []
    for i in range(n):
        f, g, t = _unpack(patches, [i])
        u, _ = model.forward(f, g, train=False, solver_cfg=solver_cfg)
        vals.append(psnr(u[0, 0], t[0, 0]))
    return float(np.mean(vals))


def train(
    model: CascadeModel,
    patches: PatchSet,
    cfg: SGDConfig,
    solver_cfg: SolverConfig | None = None,
    seed: int = 0,
    val_patches: PatchSet | None = None,
    start_epoch: int = 0,
    run: TrainRun | None = None,
    on_epoch_end=None,
) -> TrainRun:
    """Train in place; returns the (possibly resumed) TrainRun log.

    `on_epoch_end(epoch, model, run)` is invoked after each epoch's
    evaluation, e.g. to write checkpoints.  A non-finite loss raises
    TrainingError after flagging the run as diverged.
    """
    expected_arity = 2 if model.config.task == "denoise" else 2 + model.config.guide_channels
    if patches.arity != expected_arity:
        raise ValueError(
            f"task {model.config.task!r} expects patch arity {expected_arity}, "
            f"got {patches.arity}"
        )
    solver_cfg = solver_cfg or SolverConfig()
    run = run or TrainRun(seed=seed)
    params = model.params()
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for step, idx in enumerate(split_batches(patches.count, cfg.batch_size, seed, epoch)):
            f, g, t = _unpack(patches, idx)
            try:
                u, caches = model.forward(f, g, train=True, solver_cfg=solver_cfg)
            except CascadeError as e:
                run.diverged = True
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {step}: forward failed ({e})"
                ) from e
            loss, dl = l1_loss(u, t)
            if not np.isfinite(loss):
                run.diverged = True
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            for p in params:
                p.zero_grad()
            model.backward(caches, dl, solver_cfg=solver_cfg)
            sgd_step(params, lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
            losses.append(loss)
            run.step_log.append((epoch, step, lr, loss))
        run.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        if val_patches is not None:
            run.eval_log.append((epoch, evaluate_psnr(model, val_patches, solver_cfg)))
        run.epochs_run = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, run)
    return run


# ---------------------------------------------------------------------------
# Exact-resume training state (float64 parameters + momentum)
# ---------------------------------------------------------------------------


def save_train_state(path, model: CascadeModel, run: TrainRun) -> None:
    arrays = {}
    for i, p in enumerate(model.params()):
        arrays[f"value_{i}"] = p.value
        arrays[f"momentum_{i}"] = p.momentum
    for k, net in enumerate(model.nets):
        for j, norm in enumerate(net.norms()):
            arrays[f"rmean_{k}_{j}"] = norm.running_mean
            arrays[f"rvar_{k}_{j}"] = norm.running_var
    meta = {
        "config": asdict(model.config),
        "seed": run.seed,
        "epochs_run": run.epochs_run,
        "step_log": run.step_log,
        "epoch_losses": run.epoch_losses,
        "eval_log": run.eval_log,
    }
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_train_state(path):
    """Returns (model, run) rebuilt exactly as saved."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
        model = CascadeModel(ModelConfig(**meta["config"]), seed=meta["seed"])
        for i, p in enumerate(model.params()):
            p.value[...] = data[f"value_{i}"]
            p.momentum[...] = data[f"momentum_{i}"]
        for k, net in enumerate(model.nets):
            for j, norm in enumerate(net.norms()):
                norm.running_mean = data[f"rmean_{k}_{j}"].copy()
                norm.running_var = data[f"rvar_{k}_{j}"].copy()
    run = TrainRun(
        seed=meta["seed"],
        epochs_run=meta["epochs_run"],
        step_log=[tuple(row) for row in meta["step_log"]],
        epoch_losses=meta["epoch_losses"],
        eval_log=[tuple(row) for row in meta["eval_log"]],
    )
    return model, run
