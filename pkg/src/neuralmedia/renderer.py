"""Neural ray marcher.

Each camera ray is cut into ``n_samples`` equal cells between its entry and
exit of the network bounds, with one jittered sample per cell.  At every
sample the in-scattered radiance is the single-scattering term towards the
point light (and the sky) plus the multiple-scattering term integrated from
the learned SH incident radiance.  Samples are alpha-composited; whatever
transmittance remains after the last sample sees the background.

The marcher talks to a *source* that supplies medium properties, SH
coefficients and shadow visibility.  ``NeuralSource`` wraps a network set;
``OracleSource`` substitutes exact scene queries, which lets the estimator
be checked against the path tracer independently of any learning.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import Camera
from .errors import DomainError, NumericalError
from .fields import NetworkSet, encode_light_batch
from .hdrimage import HdrImage
from .lights import EnvLight, LightCondition
from .mathkit import CounterRNG, sample_sphere, sh_basis
from .media import MediumSample, SceneDescription, _slab, medium_at
from .oracle import ProbeShField, shadow_transmittance

log = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi


@dataclass(frozen=True)
class MarchConfig:
    n_samples: int = 64
    k_dirs: int = 64
    env_dirs: int = 32
    point_shadow_rays: int = 1
    visibility_source: str = "learned"
    seed: int = 0
    strict_paper: bool = False
    shadow_steps: int = 64
    chunk_rays: int = 512
    threads: int = 1

    def __post_init__(self):
        if min(self.n_samples, self.k_dirs, self.env_dirs, self.point_shadow_rays,
               self.shadow_steps, self.chunk_rays, self.threads) < 1:
            raise DomainError("march counts must all be >= 1")
        if self.visibility_source not in ("learned", "oracle"):
            raise DomainError(f"visibility source must be learned or oracle, not {self.visibility_source!r}")


@dataclass
class LightBatch:
    """Per-ray light conditions plus the shared sky and background."""

    pos: np.ndarray        # (R, 3)
    intensity: np.ndarray  # (R,)
    env: np.ndarray        # (R,) bool
    sky: EnvLight = field(default_factory=EnvLight)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def uniform(cls, light: LightCondition, n: int, sky=None, background=(0.0, 0.0, 0.0)):
        return cls(np.tile(light.pos, (n, 1)), np.full(n, light.intensity), np.full(n, light.env),
                   sky or EnvLight(), np.asarray(background, dtype=np.float64))

    def take(self, idx) -> "LightBatch":
        return LightBatch(self.pos[idx], self.intensity[idx], self.env[idx], self.sky, self.background)

    def repeat(self, n: int) -> "LightBatch":
        return LightBatch(np.repeat(self.pos, n, axis=0), np.repeat(self.intensity, n),
                          np.repeat(self.env, n), self.sky, self.background)

    def escape(self, d) -> np.ndarray:
        """Radiance seen by rays leaving the medium unscattered."""
        out = np.broadcast_to(self.background, d.shape).astype(np.float64)
        if np.any(self.env):
            out = out + self.env[:, None] * self.sky.radiance(d)
        return out


# --------------------------------------------------------------------------
# sources

class NeuralSource:
    """Network-backed source; ``scene`` supplies sky, background and oracle shadows."""

    def __init__(self, net: NetworkSet, scene: SceneDescription | None = None):
        self.net = net
        self.scene = scene
        self.bounds = net.bounds
        self.sky = scene.env if scene is not None else EnvLight()
        self.background = np.asarray(scene.background if scene is not None else (0.0, 0.0, 0.0))

    @property
    def dtype(self):
        return self.net.dtype

    @property
    def sh_enabled(self) -> bool:
        return self.net.sh_enabled

    def medium(self, p, tape=None):
        feat = self.net.features(p, tape)
        sigma, albedo, g = self.net.properties(feat, tape)
        return sigma, albedo, g, feat

    def sh_coeffs(self, p, feat, lights: LightBatch, tape=None):
        code = encode_light_batch(lights.pos, lights.intensity, lights.env, self.net.config)
        return self.net.sh(feat, code, tape)

    def visibility(self, p, w, dist, cfg: MarchConfig) -> np.ndarray:
        if cfg.visibility_source == "oracle":
            if self.scene is None:
                raise DomainError("oracle visibility needs a scene description")
            return shadow_transmittance(self.scene, p, w, dist, cfg.shadow_steps)
        return np.asarray(self.net.visibility(p, w).value)


class OracleSource:
    """Exact scene properties and shadows; SH from a probe-fitted field when given."""

    def __init__(self, scene: SceneDescription, probe: ProbeShField | None = None, dtype=np.float64):
        self.scene = scene
        self.probe = probe
        self.bounds = scene.world_bounds()
        self.sky = scene.env
        self.background = np.asarray(scene.background)
        self.dtype = np.dtype(dtype)

    @property
    def sh_enabled(self) -> bool:
        return self.probe is not None

    def medium(self, p, tape=None):
        ms = medium_at(self.scene, p)
        return ad.Var(ms.sigma), ad.Var(ms.albedo), ad.Var(ms.g), None

    def sh_coeffs(self, p, feat, lights, tape=None):
        return ad.Var(self.probe(p)) if self.probe is not None else None

    def visibility(self, p, w, dist, cfg: MarchConfig) -> np.ndarray:
        return shadow_transmittance(self.scene, p, w, dist, cfg.shadow_steps)


def as_source(obj, scene=None):
    return NeuralSource(obj, scene) if isinstance(obj, NetworkSet) else obj


# --------------------------------------------------------------------------
# direction sets

def sh_directions(cfg: MarchConfig, step: int = 0):
    """Stratified jittered directions shared by every point of a batch, with their SH basis."""
    rng = np.random.default_rng([cfg.seed, step, 0x5348])
    dirs, _ = sample_sphere("stratified", cfg.k_dirs, rng)
    return dirs


def env_directions(cfg: MarchConfig) -> np.ndarray:
    dirs, _ = sample_sphere("stratified", cfg.env_dirs)
    return dirs


# --------------------------------------------------------------------------
# scattering terms (vectorised over points, differentiable in the properties)

def _single(source, p, w_o, albedo, g, lights: LightBatch, cfg: MarchConfig, env_dirs):
    """Single scattering a * integral(rho * L_light * V) at points p; Var (P, 3)."""
    to_l = lights.pos - p
    dist = np.linalg.norm(to_l, axis=-1)
    w_l = to_l / np.maximum(dist, 1e-12)[:, None]
    vis = source.visibility(p, w_l, dist, cfg)
    cos = np.sum(w_o * w_l, axis=-1)
    point = (lights.intensity / np.maximum(dist * dist, 1e-12) * vis).astype(source.dtype)
    ls = ad.mul(ad.hg_phase(cos.astype(source.dtype), g), point)
    ls = ad.reshape(ls, (-1, 1))
    env_rows = np.nonzero(lights.env)[0]
    if env_rows.size:
        pe, woe = p[env_rows], w_o[env_rows]
        n_env = env_dirs.shape[0]
        ge = ad.reshape(ad.getitem(g, env_rows), (-1, 1))
        vis_e = np.empty((env_rows.size, n_env))
        for k, w in enumerate(env_dirs):
            vis_e[:, k] = source.visibility(pe, np.broadcast_to(w, pe.shape), np.full(env_rows.size, np.inf), cfg)
        rho = ad.hg_phase((woe @ env_dirs.T).astype(source.dtype), ge)
        sky = (lights.sky.radiance(env_dirs) * (FOUR_PI / n_env)).astype(source.dtype)
        le = ad.matmul(ad.mul(rho, vis_e.astype(source.dtype)), sky)
        base = np.zeros((p.shape[0], 3), dtype=source.dtype)
        ls = ad.add(ls, ad.scatter_rows(le, env_rows, base))
    return ad.mul(albedo, ls)


def _multiple(coeffs, w_o, albedo, g, dirs, basis, strict_paper: bool, dtype):
    """a * (4 pi / K) * sum_k rho(w_o, w_k) * max(0, SH(w_k)); Var (P, 3)."""
    k = dirs.shape[0]
    lin = ad.relu(ad.matmul(basis.astype(dtype), coeffs))        # (P, K, 3)
    rho = ad.hg_phase((w_o @ dirs.T).astype(dtype), ad.reshape(g, (-1, 1)))  # (P, K)
    acc = ad.sum(ad.mul(ad.reshape(rho, (-1, k, 1)), lin), axis=1)
    scale = (1.0 if strict_paper else FOUR_PI) / k
    return ad.mul(albedo, ad.mul(acc, scale))


def _sample_to_vars(sample: MediumSample):
    return (ad.Var(np.atleast_1d(np.asarray(sample.albedo, dtype=np.float64)).reshape(-1, 3)),
            ad.Var(np.atleast_1d(np.asarray(sample.g, dtype=np.float64))))


def single_scatter(source, p, w_o, sample: MediumSample, light: LightCondition, cfg: MarchConfig,
                   scene: SceneDescription | None = None) -> np.ndarray:
    """Single-scattered radiance at points p towards w_o (arrays in, RGB array out)."""
    source = as_source(source, scene)
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    w_o = np.broadcast_to(np.asarray(w_o, dtype=np.float64), p.shape)
    albedo, g = _sample_to_vars(sample)
    lights = LightBatch.uniform(light, p.shape[0], source.sky, source.background)
    out = _single(source, p, w_o, albedo, g, lights, cfg, env_directions(cfg))
    return np.asarray(out.value, dtype=np.float64)


def multiple_scatter(p, w_o, sample: MediumSample, coeffs, cfg: MarchConfig, step: int = 0) -> np.ndarray:
    """Multiple-scattered radiance from SH coefficients (C, 3) or (P, C, 3)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    c = coeffs.coeffs if hasattr(coeffs, "coeffs") else np.asarray(coeffs, dtype=np.float64)
    c = np.broadcast_to(c, (p.shape[0],) + c.shape[-2:])
    l_max = math.isqrt(c.shape[-2]) - 1
    dirs = sh_directions(cfg, step)
    albedo, g = _sample_to_vars(sample)
    w_o = np.broadcast_to(np.asarray(w_o, dtype=np.float64), p.shape)
    out = _multiple(ad.Var(c), w_o, albedo, g, dirs, sh_basis(l_max, dirs), cfg.strict_paper, np.float64)
    return np.asarray(out.value, dtype=np.float64)


# --------------------------------------------------------------------------
# marching

@dataclass
class MarchResult:
    total: ad.Var      # (R, 3)
    direct: ad.Var
    indirect: ad.Var
    points: np.ndarray  # (H, N, 3) sample positions of hit rays
    hit: np.ndarray     # (R,) indices of rays that entered the bounds
    weights: np.ndarray  # (H, N) compositing weights tau * alpha


def ray_box(bounds, o, d):
    t0, t1 = _slab(o, d, bounds)
    t0 = np.maximum(t0, 0.0)
    return t0, t1, t1 > t0


def march_batch(source, o, d, lights: LightBatch, cfg: MarchConfig, tape=None,
                ray_ids=None, step: int = 0, sh_dirs=None) -> MarchResult:
    """March a batch of rays; differentiable w.r.t. the source parameters when ``tape`` is given.

    Jitter for ray i is drawn from the counter stream keyed by (ray_ids[i], step),
    so results do not depend on how rays are grouped into batches.
    """
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    nr = o.shape[0]
    ray_ids = np.arange(nr) if ray_ids is None else np.asarray(ray_ids)
    dt = source.dtype
    bg = lights.escape(d)
    t0, t1, hit = ray_box(source.bounds, o, d)
    idx = np.nonzero(hit)[0]
    n = cfg.n_samples
    if idx.size == 0:
        z = np.zeros((nr, 3), dtype=dt)
        bgv = bg.astype(dt)
        return MarchResult(ad.Var(bgv), ad.Var(bgv.copy()), ad.Var(z), np.zeros((0, n, 3)), idx,
                           np.zeros((0, n)))
    oh, dh, lh = o[idx], d[idx], lights.take(idx)
    delta = (t1[idx] - t0[idx]) / n
    jitter = CounterRNG(cfg.seed).uniforms(ray_ids[idx], step, n)
    t = t0[idx, None] + (np.arange(n) + jitter) * delta[:, None]
    pts = oh[:, None, :] + t[..., None] * dh[:, None, :]
    p = pts.reshape(-1, 3)
    w_o = np.repeat(-dh, n, axis=0)
    lp = lh.repeat(n)

    sigma, albedo, g, feat = source.medium(p, tape)
    l_s = _single(source, p, w_o, albedo, g, lp, cfg, env_directions(cfg))
    coeffs = source.sh_coeffs(p, feat, lp, tape) if source.sh_enabled else None
    if coeffs is not None:
        dirs = sh_directions(cfg, step) if sh_dirs is None else sh_dirs
        l_max = math.isqrt(ad.value(coeffs).shape[1]) - 1
        l_m = _multiple(coeffs, w_o, albedo, g, dirs, sh_basis(l_max, dirs), cfg.strict_paper, dt)
    else:
        l_m = None

    depth = ad.mul(ad.reshape(sigma, (-1, n)), delta[:, None].astype(dt))
    alpha = ad.opacity(depth)
    tau = ad.exp(ad.mul(ad.exclusive_cumsum(depth, axis=1), -1.0))
    w = ad.reshape(ad.mul(tau, alpha), (-1, n, 1))
    residual = ad.exp(ad.mul(ad.sum(depth, axis=1, keepdims=True), -1.0))
    direct = ad.add(ad.sum(ad.mul(w, ad.reshape(l_s, (-1, n, 3))), axis=1),
                    ad.mul(residual, bg[idx].astype(dt)))
    if l_m is not None:
        indirect = ad.sum(ad.mul(w, ad.reshape(l_m, (-1, n, 3))), axis=1)
    else:
        indirect = ad.Var(np.zeros((idx.size, 3), dtype=dt))

    base = bg.astype(dt)
    direct_all = ad.scatter_rows(direct, idx, base)
    indirect_all = ad.scatter_rows(indirect, idx, np.zeros_like(base))
    total = ad.add(direct_all, indirect_all)
    if not np.all(np.isfinite(total.value)):
        bad = np.argwhere(~np.isfinite(total.value))[0]
        raise NumericalError(f"non-finite radiance from the marcher at ray {bad[0]} channel {bad[1]}")
    return MarchResult(total, direct_all, indirect_all, pts, idx, ad.value(w)[..., 0])


def march_ray(source, origin, direction, light: LightCondition, cfg: MarchConfig, scene=None):
    """Radiance (total, direct, indirect) along one ray."""
    source = as_source(source, scene)
    lights = LightBatch.uniform(light, 1, source.sky, source.background)
    r = march_batch(source, np.asarray(origin)[None], np.asarray(direction)[None], lights, cfg)
    return tuple(np.asarray(v.value[0], dtype=np.float64) for v in (r.total, r.direct, r.indirect))


def render_image(source, camera: Camera, light: LightCondition, cfg: MarchConfig,
                 scene: SceneDescription | None = None) -> HdrImage:
    """Render every pixel centre; returns an image with direct/indirect layers."""
    if camera.width < 1 or camera.height < 1:
        raise DomainError("camera resolution must be positive")
    source = as_source(source, scene)
    o, d = camera.pixel_rays()
    n = o.shape[0]
    lights = LightBatch.uniform(light, n, source.sky, source.background)
    dirs = sh_directions(cfg, 0)
    chunks = [np.arange(s, min(s + cfg.chunk_rays, n)) for s in range(0, n, cfg.chunk_rays)]

    def work(ids):
        r = march_batch(source, o[ids], d[ids], lights.take(ids), cfg, ray_ids=ids, sh_dirs=dirs)
        return np.asarray(r.direct.value, np.float64), np.asarray(r.indirect.value, np.float64)

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    shape = (camera.height, camera.width, 3)
    direct = np.concatenate([p[0] for p in parts]).reshape(shape)
    indirect = np.concatenate([p[1] for p in parts]).reshape(shape)
    return HdrImage.from_layers(direct, indirect)
