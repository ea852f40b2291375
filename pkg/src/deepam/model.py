"""The unrolled restoration cascade.

Each of the K iterations runs a deep aggregation trunk over the current
estimate (optionally fused with guidance features), emits a 2-channel
split variable v = (v_x, v_y) and a ReLU-positive per-pixel data weight
gamma, and then solves the weighted reconstruction system
L u = gamma*f + D^T v anchored to the original degraded input f.  All K
iterations carry independent parameters and are trained jointly: the
backward pass routes the loss gradient through one extra solve per
iteration (the system factorization is shared between the forward solve
and both backward formulas) and on into the networks.

Intensities are divided by `config.scale` at the cascade boundary so the
learned weights live on a unit-range signal regardless of the caller's
[0, 255] convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import solver as _solver
from .images import gradient_adjoint
from .nn import BatchNorm, Conv3x3, check_tensor4, relu_backward, relu_forward

TASKS = ("denoise", "joint")
CONCAT_MODES = ("halfway", "early")


class CascadeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; serialized into checkpoints.

    gamma_tap is the 1-based trunk conv whose post-activation features feed
    the weight branch (0 selects the default, depth - 2); guide_concat is
    the trunk conv after whose activation the guidance features are
    concatenated (halfway mode).
    """

    task: str = "denoise"
    k: int = 2
    depth: int = 6
    width: int = 16
    guide_channels: int = 0
    concat: str = "halfway"
    guide_concat: int = 3
    gamma_tap: int = 0
    image_channels: int = 1
    sr_factor: int = 0
    scale: float = 255.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.concat not in CONCAT_MODES:
            raise ValueError(f"concat must be one of {CONCAT_MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 2:
            raise ValueError("width must be >= 2")
        if self.task == "joint" and self.guide_channels < 1:
            raise ValueError("joint task needs guide_channels >= 1")
        if self.task == "denoise" and self.guide_channels != 0:
            raise ValueError("denoise task takes no guidance")
        tap = self.tap_index
        if not 1 <= tap <= self.depth - 1:
            raise ValueError(f"gamma tap {tap} outside [1, depth-1]")
        if self.task == "joint" and self.concat == "halfway":
            if not 1 <= self.guide_concat <= self.depth - 1:
                raise ValueError("guide_concat must name a hidden trunk conv")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def tap_index(self) -> int:
        return self.gamma_tap if self.gamma_tap else max(1, self.depth - 2)

    @property
    def guide_feat_channels(self) -> int:
        return self.width // 2


class IterationNet:
    """One iteration's networks: aggregation trunk, weight branch, and the
    optional guidance feature extractor."""

    def __init__(self, cfg: ModelConfig, rng, index: int = 0):
        self.cfg = cfg
        self.index = index
        name = f"iter{index}"
        w = cfg.width
        gfc = cfg.guide_feat_channels
        halfway = cfg.task == "joint" and cfg.concat == "halfway"
        early = cfg.task == "joint" and cfg.concat == "early"

        self.trunk_convs: list[Conv3x3] = []
        self.trunk_norms: list[BatchNorm] = []
        for i in range(cfg.depth):
            if i == 0:
                in_ch = cfg.image_channels + (cfg.guide_channels if early else 0)
            else:
                in_ch = w + (gfc if halfway and i == cfg.guide_concat else 0)
            out_ch = 2 if i == cfg.depth - 1 else w
            self.trunk_convs.append(Conv3x3(in_ch, out_ch, rng, name=f"{name}.trunk{i}"))
            if i < cfg.depth - 1:
                self.trunk_norms.append(BatchNorm(out_ch, name=f"{name}.norm{i}"))

        self.gamma_a = Conv3x3(w, max(1, w // 2), rng, name=f"{name}.gamma_a")
        self.gamma_b = Conv3x3(max(1, w // 2), 1, rng, name=f"{name}.gamma_b")

        self.guide_convs: list[Conv3x3] = []
        if halfway:
            chans = [cfg.guide_channels, gfc, gfc, gfc]
            for i in range(3):
                self.guide_convs.append(
                    Conv3x3(chans[i], chans[i + 1], rng, name=f"{name}.guide{i}")
                )

    # -- forward -----------------------------------------------------------

    def forward(self, u: np.ndarray, g: np.ndarray | None = None, train: bool = True):
        """Map the current estimate (B, C, H, W) to (v, gamma, cache);
        v is (B, 2, H, W) and gamma is a nonnegative (B, 1, H, W) map."""
        cfg = self.cfg
        u = check_tensor4(u)
        if (g is not None) != (cfg.task == "joint"):
            raise ValueError("guidance must be supplied iff the task is joint")
        if g is not None:
            g = check_tensor4(g)
            if g.shape[0] != u.shape[0] or g.shape[2:] != u.shape[2:]:
                raise ValueError(f"guidance shape {g.shape} does not match input {u.shape}")

        gfeat = None
        guide_cache = []
        if self.guide_convs:
            a = g
            for i, conv in enumerate(self.guide_convs):
                a, ck = conv.forward(a)
                mask = None
                if i < len(self.guide_convs) - 1:
                    a, mask = relu_forward(a)
                guide_cache.append((ck, mask))
            gfeat = a

        h = np.concatenate([u, g], axis=1) if cfg.concat == "early" and g is not None else u
        trunk_cache = []
        tap_act = None
        for i, conv in enumerate(self.trunk_convs):
            h, ck = conv.forward(h)
            if i == cfg.depth - 1:
                trunk_cache.append((ck, None, None))
                break
            h, nk = self.trunk_norms[i].forward(h, train)
            h, mask = relu_forward(h)
            trunk_cache.append((ck, nk, mask))
            if i + 1 == cfg.tap_index:
                tap_act = h
            if gfeat is not None and i + 1 == cfg.guide_concat:
                h = np.concatenate([h, gfeat], axis=1)
        v = h

        t1, ca = self.gamma_a.forward(tap_act)
        t2, cb = self.gamma_b.forward(t1)
        gamma, gmask = relu_forward(t2)

        cache = {
            "trunk": trunk_cache,
            "gamma": (ca, cb, gmask),
            "guide": guide_cache,
            "early": cfg.concat == "early" and g is not None,
        }
        return v, gamma, cache

    # -- backward ----------------------------------------------------------

    def backward(self, dv: np.ndarray, dgamma: np.ndarray, cache) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the
        iteration's input estimate."""
        cfg = self.cfg
        ca, cb, gmask = cache["gamma"]
        d = relu_backward(dgamma, gmask)
        d = self.gamma_b.backward(d, cb)
        dtap = self.gamma_a.backward(d, ca)

        trunk_cache = cache["trunk"]
        dguide = None
        dh = self.trunk_convs[cfg.depth - 1].backward(dv, trunk_cache[-1][0])
        for i in range(cfg.depth - 2, -1, -1):
            ck, nk, mask = trunk_cache[i]
            if cache["guide"] and i + 1 == cfg.guide_concat:
                dh, dguide = np.split(dh, [cfg.width], axis=1)
            if i + 1 == cfg.tap_index:
                dh = dh + dtap
            dh = relu_backward(dh, mask)
            dh = self.trunk_norms[i].backward(dh, nk)
            dh = self.trunk_convs[i].backward(dh, ck)

        if cache["guide"]:
            dg = dguide
            for i in range(len(self.guide_convs) - 1, -1, -1):
                ck, mask = cache["guide"][i]
                if mask is not None:
                    dg = relu_backward(dg, mask)
                dg = self.guide_convs[i].backward(dg, ck)
            # guidance is data, its gradient is dropped

        if cache["early"]:
            dh = dh[:, : cfg.image_channels]
        return dh

    def params(self):
        out = []
        for i, conv in enumerate(self.trunk_convs):
            out.extend(conv.params())
            if i < len(self.trunk_norms):
                out.extend(self.trunk_norms[i].params())
        out.extend(self.gamma_a.params())
        out.extend(self.gamma_b.params())
        for conv in self.guide_convs:
            out.extend(conv.params())
        return out

    def norms(self):
        return list(self.trunk_norms)


@dataclass
class IterationCache:
    net_cache: dict
    systems: list  # per-image FactorizedSystem
    f_norm: np.ndarray  # (B, C, H, W) normalized anchor
    u_out: np.ndarray  # (B, C, H, W) iteration output (normalized)
    floor_mask: np.ndarray  # d(max(gamma, floor))/d(gamma)
    reports: list = field(default_factory=list)


class CascadeModel:
    """K unrolled iterations with independent per-iteration parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.nets = [
            IterationNet(config, np.random.default_rng((seed, k)), index=k)
            for k in range(config.k)
        ]

    def params(self):
        return [p for net in self.nets for p in net.params()]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    # -- cascade forward ---------------------------------------------------

    def forward(
        self,
        f: np.ndarray,
        g: np.ndarray | None = None,
        train: bool = True,
        solver_cfg: _solver.SolverConfig | None = None,
    ):
        """Run all K iterations; returns (u_K on the caller's intensity
        scale, caches for backward).  f is (B, C, H, W)."""
        cfg = self.config
        sc = solver_cfg or _solver.SolverConfig()
        f = check_tensor4(f)
        if f.shape[1] != cfg.image_channels:
            raise ValueError(f"expected {cfg.image_channels} image channels, got {f.shape[1]}")
        fn = f / cfg.scale
        gn = None if g is None else check_tensor4(g) / cfg.scale

        u = fn
        caches: list[IterationCache] = []
        for k, net in enumerate(self.nets):
            v, gamma, net_cache = net.forward(u, gn, train)
            b = fn.shape[0]
            u_next = np.empty_like(u)
            systems = []
            reports = []
            for i in range(b):
                try:
                    system = _solver.factorize(gamma[i, 0])
                    rhs = system.L.gamma_eff * fn[i, 0] + gradient_adjoint(v[i])
                    x, rep = system.solve(
                        rhs, tol=sc.tol, max_iter=sc.max_iter, require_convergence=True
                    )
                except _solver.SolverError as e:
                    raise CascadeError(f"iteration {k}, image {i}: {e}") from e
                u_next[i, 0] = x
                systems.append(system)
                reports.append(rep)
            caches.append(
                IterationCache(
                    net_cache=net_cache,
                    systems=systems,
                    f_norm=fn,
                    u_out=u_next,
                    floor_mask=(gamma > _solver.GAMMA_FLOOR).astype(np.float64),
                    reports=reports,
                )
            )
            u = u_next
        return u * cfg.scale, caches

    # -- cascade backward --------------------------------------------------

    def backward(
        self,
        caches: list[IterationCache],
        dl_du: np.ndarray,
        solver_cfg: _solver.SolverConfig | None = None,
    ) -> None:
        """Accumulate parameter gradients for all K iterations from the loss
        gradient at the final output (caller's intensity scale)."""
        cfg = self.config
        sc = solver_cfg or _solver.SolverConfig()
        d = np.asarray(dl_du, dtype=np.float64) * cfg.scale
        for k in range(cfg.k - 1, -1, -1):
            cache = caches[k]
            b = d.shape[0]
            h, w = d.shape[2:]
            dv = np.empty((b, 2, h, w))
            dgamma = np.empty((b, 1, h, w))
            for i in range(b):
                dvi, dgi, _ = _solver.reconstruct_backward(
                    cache.systems[i],
                    d[i, 0],
                    cache.f_norm[i, 0],
                    cache.u_out[i, 0],
                    tol=sc.backward_tol,
                    max_iter=sc.backward_max_iter,
                )
                dv[i] = dvi
                dgamma[i, 0] = dgi
            dgamma *= cache.floor_mask  # derivative of the assembly clamp
            d = self.nets[k].backward(dv, dgamma, cache.net_cache)

    # -- inference ---------------------------------------------------------

    def infer(
        self,
        f: np.ndarray,
        g: np.ndarray | None = None,
        solver_cfg: _solver.SolverConfig | None = None,
        return_stages: bool = False,
    ):
        """Full-image restoration with normalization layers in eval mode.

        f is (H, W) (or (C, H, W) matching the configured channels); with
        `return_stages` the per-iteration estimates are returned as well.
        """
        cfg = self.config
        f = np.asarray(f, dtype=np.float64)
        single = f.ndim == 2
        fb = f[None, None] if single else f[None]
        gb = None
        if g is not None:
            g = np.asarray(g, dtype=np.float64)
            gb = g[None, None] if g.ndim == 2 else g[None]
        if not return_stages:
            u, _ = self.forward(fb, gb, train=False, solver_cfg=solver_cfg)
            return u[0, 0] if single else u[0]
        stages = []
        sc = solver_cfg or _solver.SolverConfig()
        u, caches = self.forward(fb, gb, train=False, solver_cfg=sc)
        for cache in caches:
            s = cache.u_out * cfg.scale
            stages.append(s[0, 0] if single else s[0])
        return (u[0, 0] if single else u[0]), stages


def build_model(config: ModelConfig, seed: int = 0) -> CascadeModel:
    return CascadeModel(config, seed=seed)


def desk_config(task: str = "denoise", **overrides) -> ModelConfig:
    """Small architecture for CPU-scale experiments (K=2, depth 6, width 16)."""
    base = dict(task=task, k=2, depth=6, width=16)
    if task == "joint":
        base["guide_channels"] = 1
    base.update(overrides)
    return ModelConfig(**base)


def full_scale_config(task: str = "denoise", **overrides) -> ModelConfig:
    """Full-size architecture (K=3, 10 conv layers, 64 feature maps);
    expensive on a single CPU, intended for long runs."""
    base = dict(task=task, k=3, depth=10, width=64)
    if task == "joint":
        base["guide_channels"] = 3
        base["k"] = 2
    base.update(overrides)
    return ModelConfig(**base)
