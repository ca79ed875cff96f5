"""Brute-force reference renderer.

A wavefront volumetric path tracer (delta tracking against the scene
majorant, next-event estimation to the point light and the sky at every
scattering vertex, HG importance sampling, Russian roulette) plus a
deterministic single-scattering ray marcher and incident-radiance probes.

Primary rays go through pixel centres, as in every other renderer here.
Randomness is drawn from a counter-based stream keyed by (seed, path id,
step), so images do not depend on the thread count or tile schedule.
The background is a backdrop seen only by unscattered primary rays.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .errors import DomainError, NumericalError
from .hdrimage import HdrImage
from .lights import LightCondition
from .mathkit import (CounterRNG, hg_eval, hg_sample, luminance, sample_sphere, sh_count,
                      sh_project_lstsq, uniform_sphere)
from .media import SceneDescription, medium_at, ray_bounds_batch, transmittance

log = logging.getLogger(__name__)

_JITTER_STEP = 0xFFFFFFFF
_NDIM = 7  # distance, real/null, 2x phase, 2x sky direction, roulette


@dataclass(frozen=True)
class PathTracerConfig:
    spp: int = 64
    max_bounces: int = 256
    rr_start: int = 8
    rr_floor: float = 0.05
    transmittance_steps: int = 64
    seed: int = 0
    threads: int = 1
    tile_pixels: int = 256
    wave_paths: int = 1 << 17

    def __post_init__(self):
        if self.spp < 1 or self.max_bounces < 1:
            raise DomainError("spp and max_bounces must be >= 1")
        if not 0.0 < self.rr_floor <= 1.0:
            raise DomainError("rr_floor must lie in (0, 1]")
        if self.transmittance_steps < 1 or self.tile_pixels < 1 or self.wave_paths < 1:
            raise DomainError("step, tile and wave sizes must be >= 1")


def shadow_transmittance(scene: SceneDescription, p, w, max_t, steps: int) -> np.ndarray:
    """Transmittance from ``p`` along unit ``w`` up to distance ``max_t`` (may be inf)."""
    _, far, hit = ray_bounds_batch(scene, p, w)
    end = np.where(hit, np.minimum(far, max_t), 0.0)
    out = np.ones(p.shape[0])
    if np.any(hit):
        out[hit] = transmittance(scene, p[hit], p[hit] + end[hit, None] * w[hit], steps)
    return out


def _escape_radiance(scene, light, d):
    rad = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), d.shape).copy()
    if light.env:
        rad += scene.env.radiance(d)
    return rad


def trace_paths(scene: SceneDescription, light: LightCondition, o, d, stream, cfg: PathTracerConfig,
                split: int = 2, count_escape: bool = True):
    """Trace one path per (o, d); returns (low, high) radiance tallies.

    A contribution reaching the camera after k scattering events goes to
    ``low`` when k < split and to ``high`` otherwise; unscattered escapes
    count as k = 0 when ``count_escape`` is set.
    """
    rng = CounterRNG(cfg.seed)
    n = o.shape[0]
    lo = np.zeros((n, 3))
    hi = np.zeros((n, 3))
    tn, tf, hit = ray_bounds_batch(scene, o, d)
    if count_escape and split > 0:
        miss = ~hit
        lo[miss] += _escape_radiance(scene, light, d[miss])
    maj = scene.majorant
    idx = np.nonzero(hit)[0]
    if maj <= 0.0:
        if count_escape and split > 0:
            lo[idx] += _escape_radiance(scene, light, d[idx])
        return lo, hi

    o = o[idx].astype(np.float64)
    d = d[idx].astype(np.float64)
    t = tn[idx]
    t_far = tf[idx]
    sid = np.asarray(stream, dtype=np.uint64)[idx]
    beta = np.ones((idx.size, 3))
    order = np.zeros(idx.size, dtype=np.int64)
    step = 0
    lpos = light.pos
    steps = cfg.transmittance_steps

    while idx.size:
        u = rng.uniforms(sid, step, _NDIM)
        step += 1
        t = t - np.log1p(-u[:, 0]) / maj
        esc = t >= t_far
        if np.any(esc):
            zero = esc & (order == 0)
            if count_escape and split > 0 and np.any(zero):
                lo[idx[zero]] += beta[zero] * _escape_radiance(scene, light, d[zero])
            keep = ~esc
            idx, o, d, t, t_far, sid, beta, order, u = (
                a[keep] for a in (idx, o, d, t, t_far, sid, beta, order, u))
            if not idx.size:
                break
        p = o + t[:, None] * d
        ms = medium_at(scene, p)
        real = u[:, 1] * maj < ms.sigma
        if not np.any(real):
            continue
        r = np.nonzero(real)[0]
        pr = p[r]
        a = ms.albedo[r]
        g = ms.g[r]
        w_o = -d[r]
        order[r] += 1
        contrib = np.zeros((r.size, 3))

        if light.intensity > 0:
            to_l = lpos - pr
            dist = np.linalg.norm(to_l, axis=-1)
            w_l = to_l / dist[:, None]
            tr = shadow_transmittance(scene, pr, w_l, dist, steps)
            contrib += (hg_eval(w_o, w_l, g) * light.intensity / dist ** 2 * tr)[:, None]
        if light.env:
            w_e = uniform_sphere(u[r, 4], u[r, 5])
            tr = shadow_transmittance(scene, pr, w_e, np.inf, steps)
            contrib += (hg_eval(w_o, w_e, g) * tr * 4.0 * math.pi)[:, None] * scene.env.radiance(w_e)
        contrib *= beta[r] * a
        low = order[r] < split
        lo[idx[r[low]]] += contrib[low]
        hi[idx[r[~low]]] += contrib[~low]

        beta[r] *= a
        new_d, _ = hg_sample(w_o, g, u[r, 2], u[r, 3])
        d[r] = new_d
        o[r] = pr
        n2, f2, h2 = ray_bounds_batch(scene, pr, new_d)
        t[r] = n2
        t_far[r] = np.where(h2, f2, 0.0)

        alive = np.ones(idx.size, dtype=bool)
        alive[r] = h2 & (order[r] < cfg.max_bounces)
        rr = r[(order[r] >= cfg.rr_start) & alive[r]]
        if rr.size:
            q = np.clip(luminance(beta[rr]), cfg.rr_floor, 1.0)
            survive = u[rr, 6] < q
            beta[rr] /= q[:, None]
            alive[rr[~survive]] = False
        alive[r] &= np.any(beta[r] > 0, axis=-1)
        if not np.all(alive):
            idx, o, d, t, t_far, sid, beta, order = (
                a_[alive] for a_ in (idx, o, d, t, t_far, sid, beta, order))

    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise NumericalError("path tracer produced a non-finite sample")
    return lo, hi


def _render_tile(scene, camera, light, cfg, pixels):
    spp = cfg.spp
    direct = np.zeros((pixels.size, 3))
    indirect = np.zeros((pixels.size, 3))
    per_wave = max(1, cfg.wave_paths // pixels.size)
    o_pix, d_pix = camera.pixel_rays(pixels)
    for s0 in range(0, spp, per_wave):
        ns = min(per_wave, spp - s0)
        samples = np.arange(s0, s0 + ns)
        pix_idx = np.repeat(np.arange(pixels.size), ns)
        stream = (pixels[pix_idx].astype(np.uint64) * np.uint64(spp)
                  + np.tile(samples, pixels.size).astype(np.uint64))
        lo, hi = trace_paths(scene, light, o_pix[pix_idx], d_pix[pix_idx], stream, cfg)
        for c in range(3):
            direct[:, c] += np.bincount(pix_idx, lo[:, c], minlength=pixels.size)
            indirect[:, c] += np.bincount(pix_idx, hi[:, c], minlength=pixels.size)
    return direct / spp, indirect / spp


def _tiles(n_pixels: int, tile: int):
    return [np.arange(s, min(s + tile, n_pixels)) for s in range(0, n_pixels, tile)]


def render_reference(scene: SceneDescription, camera: Camera, light: LightCondition,
                     cfg: PathTracerConfig) -> HdrImage:
    """Monte Carlo image with direct (<= 1 scattering event) and indirect (>= 2) layers."""
    n = camera.width * camera.height
    tiles = _tiles(n, cfg.tile_pixels)
    work = lambda px: _render_tile(scene, camera, light, cfg, px)  # noqa: E731
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(work, tiles))
    else:
        results = [work(px) for px in tiles]
    direct = np.concatenate([r[0] for r in results]).reshape(camera.height, camera.width, 3)
    indirect = np.concatenate([r[1] for r in results]).reshape(camera.height, camera.width, 3)
    return HdrImage.from_layers(direct, indirect)


def single_scatter_radiance(scene, light, p, w_o, samples_per_point: int, steps: int) -> np.ndarray:
    """In-scattered single-scattering radiance a * integral(rho L_e V) at points p."""
    ms = medium_at(scene, p)
    out = np.zeros(p.shape[:-1] + (3,))
    if light.intensity > 0:
        to_l = light.pos - p
        dist = np.linalg.norm(to_l, axis=-1)
        w_l = to_l / dist[:, None]
        tr = shadow_transmittance(scene, p, w_l, dist, steps)
        out += (hg_eval(w_o, w_l, ms.g) * light.intensity / dist ** 2 * tr)[:, None]
    if light.env:
        dirs, _ = sample_sphere("stratified", samples_per_point)
        acc = np.zeros_like(out)
        for w in dirs:
            wb = np.broadcast_to(w, p.shape)
            tr = shadow_transmittance(scene, p, wb, np.inf, steps)
            acc += (hg_eval(w_o, wb, ms.g) * tr)[:, None] * scene.env.radiance(w)
        out += acc * (4.0 * math.pi / len(dirs))
    return out * ms.albedo


def single_scatter_reference(scene: SceneDescription, camera: Camera, light: LightCondition,
                             samples_per_point: int = 64, n_samples: int = 256,
                             steps: int = 64, chunk: int = 1024) -> HdrImage:
    """Deterministic ray-marched single-scattering image (no indirect layer content).

    Midpoint samples in ``n_samples`` equal cells between the ray's entry and
    exit; alpha compositing as in the neural marcher; background behind.
    """
    if samples_per_point < 1 or n_samples < 1:
        raise DomainError("sample counts must be >= 1")
    o_all, d_all = camera.pixel_rays()
    out = np.zeros((o_all.shape[0], 3))
    for s in range(0, o_all.shape[0], chunk):
        o, d = o_all[s:s + chunk], d_all[s:s + chunk]
        tn, tf, hit = ray_bounds_batch(scene, o, d)
        bg = _escape_radiance(scene, light, d)
        res = bg.copy()
        hi = np.nonzero(hit)[0]
        if hi.size:
            cell = (tf[hi] - tn[hi]) / n_samples
            tj = tn[hi, None] + (np.arange(n_samples) + 0.5) * cell[:, None]
            p = o[hi, None, :] + tj[..., None] * d[hi, None, :]
            pf = p.reshape(-1, 3)
            w_o = np.repeat(-d[hi], n_samples, axis=0)
            sigma = medium_at(scene, pf).sigma.reshape(hi.size, n_samples)
            ls = single_scatter_radiance(scene, light, pf, w_o, samples_per_point, steps)
            ls = ls.reshape(hi.size, n_samples, 3)
            sd = sigma * cell[:, None]
            alpha = -np.expm1(-sd)
            tau = np.exp(-(np.cumsum(sd, axis=1) - sd))
            w = tau * alpha
            t_end = np.exp(-np.sum(sd, axis=1))
            res[hi] = np.einsum("rn,rnc->rc", w, ls) + t_end[:, None] * bg[hi]
        out[s:s + chunk] = res
    rgb = out.reshape(camera.height, camera.width, 3)
    return HdrImage(rgb, rgb, np.zeros_like(rgb))


def incident_radiance_probe(scene: SceneDescription, p, light: LightCondition, n_dirs: int,
                            spp_per_dir: int, min_bounces: int = 1, seed: int = 0,
                            cfg: PathTracerConfig | None = None):
    """Brute-force incident radiance at ``p`` from light scattered >= min_bounces times.

    Returns (dirs, rgb): ``dirs[i]`` points away from ``p`` towards where the
    light comes from.
    """
    dirs, rgb = probe_many(scene, np.asarray(p, dtype=np.float64)[None], light, n_dirs,
                           spp_per_dir, min_bounces, seed, cfg)
    return dirs[0], rgb[0]


def probe_many(scene, points, light, n_dirs, spp_per_dir, min_bounces=1, seed=0, cfg=None):
    """Vectorised probes at several points: dirs (P, n, 3), rgb (P, n, 3)."""
    cfg = cfg or PathTracerConfig(seed=seed)
    if cfg.seed != seed:
        cfg = PathTracerConfig(**{**cfg.__dict__, "seed": seed})
    rng = CounterRNG(seed)
    npts = points.shape[0]
    dir_ids = np.arange(npts * n_dirs, dtype=np.uint64)
    ud = rng.uniforms(dir_ids, _JITTER_STEP, 2)
    dirs = uniform_sphere(ud[:, 0], ud[:, 1])
    out = np.zeros((npts * n_dirs, 3))
    per_wave = max(1, cfg.wave_paths // spp_per_dir)
    for s0 in range(0, npts * n_dirs, per_wave):
        ids = np.arange(s0, min(s0 + per_wave, npts * n_dirs))
        rep = np.repeat(ids, spp_per_dir)
        stream = rep.astype(np.uint64) * np.uint64(spp_per_dir) + np.tile(
            np.arange(spp_per_dir, dtype=np.uint64), ids.size)
        origins = np.repeat(points, n_dirs, axis=0)[rep]
        _, hi = trace_paths(scene, light, origins, dirs[rep], stream, cfg,
                            split=min_bounces, count_escape=False)
        local = rep - s0
        for c in range(3):
            out[ids, c] += np.bincount(local, hi[:, c], minlength=ids.size)
    out /= spp_per_dir
    return dirs.reshape(npts, n_dirs, 3), out.reshape(npts, n_dirs, 3)


class ProbeShField:
    """SH incident-radiance field fitted to probes on a lattice, trilinear in between.

    Stands in for the learned SH network when validating the estimators.
    """

    def __init__(self, bounds, coeffs):
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.coeffs = np.asarray(coeffs, dtype=np.float64)  # (nx, ny, nz, C, 3)
        self.l_max = math.isqrt(self.coeffs.shape[3]) - 1

    @classmethod
    def fit(cls, scene, light, bounds, resolution: int, l_max: int, n_dirs: int,
            spp_per_dir: int, seed: int = 0, cfg: PathTracerConfig | None = None):
        bounds = np.asarray(bounds, dtype=np.float64)
        axes = [np.linspace(bounds[0][k], bounds[1][k], resolution) for k in range(3)]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        dirs, rgb = probe_many(scene, nodes, light, n_dirs, spp_per_dir, 1, seed, cfg)
        coeffs = np.empty((nodes.shape[0], sh_count(l_max), 3))
        for i in range(nodes.shape[0]):
            coeffs[i] = sh_project_lstsq(dirs[i], rgb[i], l_max)
        return cls(bounds, coeffs.reshape((resolution,) * 3 + coeffs.shape[1:]))

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        res = np.array(self.coeffs.shape[:3])
        u = (p - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) * (res - 1)
        u = np.clip(u, 0.0, res - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        f = u - i0
        out = 0.0
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    out = out + (wx * wy * wz)[:, None, None] * self.coeffs[
                        i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        return out
