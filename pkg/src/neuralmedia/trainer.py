"""End-to-end optimisation of a network set against posed HDR images.

The loss is the squared tone-mapped radiance error over a ray batch plus
``mu`` times the squared error between the visibility network and the
transmittance marched through the current learned density.  Gradients are
cut in both directions: the render term sees the visibility network only as
constants, and the visibility term sees positions and targets as constants.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DomainError, NumericalError, ResourceError
from .fields import NetworkConfig, NetworkSet
from .lights import EnvLight
from .mathkit import sample_sphere
from .renderer import LightBatch, MarchConfig, NeuralSource, march_batch, ray_box

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.log"
LOCK_NAME = "train.lock"


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 1200
    total_iters: int = 200_000
    mu: float = 0.1
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100
    vis_pairs: int | None = None  # None: one pair per ray sample
    vis_steps: int = 32
    lr0: float = 1e-4
    lr1: float = 1e-5
    lr_total: int | None = None
    march: MarchConfig = field(default_factory=lambda: MarchConfig(env_dirs=64))

    def __post_init__(self):
        if self.batch_rays < 1 or self.total_iters < 0 or self.mu < 0:
            raise DomainError("batch_rays >= 1, total_iters >= 0 and mu >= 0 are required")
        if self.vis_pairs is not None and self.vis_pairs < 0:
            raise DomainError("vis_pairs must be >= 0")
        if self.vis_steps < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise DomainError("vis_steps, checkpoint_every and log_every must be >= 1")

    def lr(self, iteration: int) -> float:
        return ad.lr_at(iteration, self.lr_total or self.total_iters or 1, self.lr0, self.lr1)


@dataclass
class RayBatch:
    """Rays with their ground-truth radiance and light conditions."""

    o: np.ndarray
    d: np.ndarray
    target: np.ndarray
    lights: LightBatch
    ids: np.ndarray

    def __post_init__(self):
        if self.o.shape[0] == 0:
            raise DomainError("a ray batch must not be empty")
        if not np.all(np.isfinite(self.target)) or np.any(self.target < 0):
            raise DataError("ground-truth radiance must be finite and non-negative")


class RayTable:
    """Every pixel of every training view, flattened."""

    def __init__(self, records, sky: EnvLight | None = None, background=(0.0, 0.0, 0.0)):
        if not records:
            raise DataError("training split is empty")
        o, d, rgb, pos, inten, env = [], [], [], [], [], []
        for rec in records:
            img = rec.image()
            cam = rec.camera
            if img.shape != (cam.height, cam.width, 3):
                raise DataError(f"{rec.path}: image {img.shape[:2]} does not match camera "
                                f"{cam.height}x{cam.width}")
            ro, rd = cam.pixel_rays()
            n = ro.shape[0]
            o.append(ro)
            d.append(rd)
            rgb.append(img.reshape(-1, 3).astype(np.float64))
            pos.append(np.tile(rec.light.pos, (n, 1)))
            inten.append(np.full(n, rec.light.intensity))
            env.append(np.full(n, rec.light.env))
        self.o, self.d, self.rgb = np.concatenate(o), np.concatenate(d), np.concatenate(rgb)
        self.lights = LightBatch(np.concatenate(pos), np.concatenate(inten), np.concatenate(env),
                                 sky or EnvLight(), np.asarray(background, dtype=np.float64))
        if not np.all(np.isfinite(self.rgb)) or np.any(self.rgb < 0):
            raise DataError("training images contain negative or non-finite radiance")

    def __len__(self):
        return self.o.shape[0]

    def batch(self, idx) -> RayBatch:
        return RayBatch(self.o[idx], self.d[idx], self.rgb[idx], self.lights.take(idx), np.asarray(idx))

    def draw(self, n: int, seed: int, iteration: int) -> RayBatch:
        """Uniform draw over all pixels; depends only on (seed, iteration)."""
        rng = np.random.default_rng([seed, iteration])
        return self.batch(rng.integers(0, len(self), n))


# --------------------------------------------------------------------------

def visibility_target(net: NetworkSet, p, d, steps: int = 32, max_dist=None) -> np.ndarray:
    """Transmittance from p along d through the learned density (no gradients).

    Marches to ``max_dist`` or the exit of the network bounds, whichever is
    nearer, with midpoint samples.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    _, t1, _ = ray_box(net.bounds, p, d)
    end = np.maximum(t1, 0.0)
    if max_dist is not None:
        end = np.minimum(end, max_dist)
    dt = end / steps
    ts = (np.arange(steps) + 0.5)[None, :] * dt[:, None]
    pts = (p[:, None, :] + ts[..., None] * d[:, None, :]).reshape(-1, 3)
    sigma = net.sigma(pts).reshape(-1, steps)
    return np.exp(-sigma.sum(axis=1) * dt)


def _tone(x):
    return ad.reciprocal_one_plus(x)


def visibility_pairs(res, batch: RayBatch, cfg: TrainConfig, step: int):
    """(p, d, max_dist) pairs drawn from the batch's march samples."""
    pts = res.points.reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    n = cfg.march.n_samples
    lights = batch.lights.take(res.hit).repeat(n)
    if cfg.vis_pairs is not None and cfg.vis_pairs < pts.shape[0]:
        rng = np.random.default_rng([cfg.seed, step, 0x5649])
        sel = np.sort(rng.choice(pts.shape[0], cfg.vis_pairs, replace=False))
    else:
        sel = np.arange(pts.shape[0])
    p = pts[sel]
    to_l = lights.pos[sel] - p
    dist = np.linalg.norm(to_l, axis=1)
    d = to_l / np.maximum(dist, 1e-12)[:, None]
    env = lights.env[sel]
    if np.any(env):
        rng = np.random.default_rng([cfg.seed, step, 0x454E])
        extra, _ = sample_sphere("uniform", int(env.sum()), rng)
        p = np.concatenate([p, p[env]])
        d = np.concatenate([d, extra])
        dist = np.concatenate([dist, np.full(extra.shape[0], np.inf)])
    return p, d, dist


def compute_loss(net: NetworkSet, batch: RayBatch, cfg: TrainConfig, tape=None, step: int = 0,
                 scene=None, terms=("render", "visibility")):
    """Returns (loss Var, {"render": float, "visibility": float}).

    ``terms`` selects which summands enter the returned loss; both are
    always evaluated for the breakdown.
    """
    source = NeuralSource(net, scene)
    res = march_batch(source, batch.o, batch.d, batch.lights, cfg.march, tape,
                      ray_ids=batch.ids, step=step)
    diff = ad.sub(_tone(res.total), (batch.target / (1.0 + batch.target)).astype(net.dtype))
    render = ad.sum(ad.square(diff))
    parts = []
    if "render" in terms:
        parts.append(render)
    vis_val = 0.0
    if cfg.mu > 0:
        p, d, dist = visibility_pairs(res, batch, cfg, step)
        if p.shape[0]:
            target = visibility_target(net, p, d, cfg.vis_steps, dist).astype(net.dtype)
            vis = ad.sum(ad.square(ad.sub(net.visibility(p, d, tape), target)))
            vis_val = float(vis.value)
            if "visibility" in terms:
                parts.append(ad.mul(vis, cfg.mu))
    loss = ad.add(parts[0], parts[1]) if len(parts) == 2 else parts[0] if parts else ad.mul(render, 0.0)
    total = float(ad.value(loss))
    if not np.isfinite(total):
        raise NumericalError(f"non-finite loss on batch of {batch.o.shape[0]} rays "
                             f"(render {float(render.value)}, visibility {vis_val})")
    return loss, {"render": float(render.value), "visibility": vis_val}


def render_loss(pred, target) -> float:
    """sum over rays and channels of (tonemap(pred) - tonemap(target))^2."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sum((pred / (1 + pred) - target / (1 + target)) ** 2))


def train_step(net: NetworkSet, batch: RayBatch, state: ad.AdamState, iteration: int,
               cfg: TrainConfig, scene=None) -> dict:
    """One forward/backward/Adam cycle; parameters unchanged if the gradients are not finite."""
    net.zero_grad()
    tape = ad.Tape()
    loss, terms = compute_loss(net, batch, cfg, tape, iteration, scene)
    tape.backward(loss)
    lr = cfg.lr(iteration)
    blocks = net.blocks
    ad.adam_step(blocks, [b.grad for b in blocks], state, lr)
    norms = {k: float(np.sqrt(sum(float(np.sum(b.grad.astype(np.float64) ** 2)) for b in g)))
             for k, g in net.groups.items()}
    return {"iteration": iteration, "lr": lr, **terms, "grad_norm": norms}


class _Lock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ResourceError(f"{self.path} exists: another training run owns this directory") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def train(table: RayTable, cfg: TrainConfig, net_cfg: NetworkConfig | None = None, out_dir=None,
          resume: bool = True, scene=None, net: NetworkSet | None = None, progress=None):
    """Optimise a network set; returns (net, metrics rows).

    With ``out_dir`` the run holds a lock file there, appends to the metrics
    log, writes checkpoints every ``checkpoint_every`` iterations and at the
    end, and resumes from an existing checkpoint when ``resume`` is set.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with _Lock(out / LOCK_NAME):
            return _train(table, cfg, net_cfg, out, resume, scene, net, progress)
    return _train(table, cfg, net_cfg, None, resume, scene, net, progress)


def _train(table, cfg, net_cfg, out, resume, scene, net, progress):
    state = ad.new_adam_state()
    start = 0
    ckpt = out / CHECKPOINT_NAME if out is not None else None
    if ckpt is not None and resume and ckpt.exists():
        net, state, start = NetworkSet.load(ckpt)
        log.info("resuming from %s at iteration %d", ckpt, start)
    elif net is None:
        net = NetworkSet(net_cfg or NetworkConfig(), seed=cfg.seed)
    rows = []
    t0 = time.perf_counter()
    logf = open(out / METRICS_NAME, "a") if out is not None else None
    try:
        if logf is not None and start == 0:
            logf.write("# iteration lr render visibility wall_seconds\n")
        for it in range(start, cfg.total_iters):
            batch = table.draw(cfg.batch_rays, cfg.seed, it)
            m = train_step(net, batch, state, it, cfg, scene)
            m["wall"] = time.perf_counter() - t0
            rows.append(m)
            if logf is not None:
                logf.write(f"{it} {m['lr']:.6e} {m['render']:.6e} {m['visibility']:.6e} {m['wall']:.2f}\n")
            if (it + 1) % cfg.log_every == 0:
                log.info("iter %d render %.4g vis %.4g", it + 1, m["render"], m["visibility"])
                if logf is not None:
                    logf.flush()
            if progress is not None:
                progress(m)
            if ckpt is not None and (it + 1) % cfg.checkpoint_every == 0:
                net.save(ckpt, state, it + 1)
        if ckpt is not None:
            net.save(ckpt, state, max(cfg.total_iters, start))
    finally:
        if logf is not None:
            logf.close()
    return net, rows


def config_to_json(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    return out


def config_from_json(obj) -> TrainConfig:
    obj = dict(obj)
    march = MarchConfig(**obj.pop("march", {}))
    return replace(TrainConfig(**obj), march=march)
