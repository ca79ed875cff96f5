"""Synthetic datasets rendered by the path tracer, plus image metrics.

Layout of a dataset directory::

    scene.json
    manifest.json
    images/{split}/{index}.pfm
"""

from __future__ import annotations

import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import Camera
from .errors import DataError, DomainError
from .hdrimage import HdrImage, load_image, read_pfm, save_image, write_pfm  # noqa: F401
from .lights import LightCondition
from .mathkit import luminance, tone_map, uniform_sphere
from .media import SceneDescription, load_scene, save_scene, scene_hash
from .oracle import PathTracerConfig, render_reference

MANIFEST_SCHEMA = "nmdataset/1"
SPLITS = ("train", "val", "test")
INTENSITY_RANGE = (50.0, 900.0)
TRAIN_LIGHT_RADIUS = (3.0, 5.0)
TEST_LIGHT_RADIUS = 4.0


@dataclass(frozen=True)
class ViewConfig:
    """Cameras on an upper view hemisphere around ``target``."""

    radius: float = 4.0
    fov_y: float = 40.0
    width: int = 64
    height: int = 64
    target: tuple = (0.0, 0.0, 0.0)
    min_elevation: float = 5.0   # degrees
    max_elevation: float = 75.0

    def to_json(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def sample_cameras(n: int, view: ViewConfig, rng: np.random.Generator) -> list[Camera]:
    """Jittered strata in elevation, golden-ratio azimuths with jitter."""
    lo, hi = math.radians(view.min_elevation), math.radians(view.max_elevation)
    z0, z1 = math.sin(lo), math.sin(hi)
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    offset = rng.random()
    cams = []
    target = np.asarray(view.target, dtype=np.float64)
    for i in range(n):
        z = z0 + (z1 - z0) * (i + rng.random()) / n
        phi = 2.0 * math.pi * ((offset + i * golden + rng.random() / n) % 1.0)
        r = math.sqrt(max(0.0, 1.0 - z * z))
        eye = target + view.radius * np.array([r * math.cos(phi), r * math.sin(phi), z])
        cams.append(Camera.look_at(eye, target, fov_y=view.fov_y, width=view.width, height=view.height))
    return cams


def sample_lights(n: int, split: str, mode: str, rng: np.random.Generator) -> list[LightCondition]:
    """White point lights around the origin; test lights sit on a fixed-radius sphere."""
    if mode not in ("point", "env+point"):
        raise DomainError(f"unknown lighting mode {mode!r}")
    u = rng.random((n, 4))
    dirs = uniform_sphere(u[:, 0], u[:, 1])
    if split == "test":
        radius = np.full(n, TEST_LIGHT_RADIUS)
    else:
        radius = TRAIN_LIGHT_RADIUS[0] + (TRAIN_LIGHT_RADIUS[1] - TRAIN_LIGHT_RADIUS[0]) * u[:, 2]
    inten = INTENSITY_RANGE[0] + (INTENSITY_RANGE[1] - INTENSITY_RANGE[0]) * u[:, 3]
    env = rng.random(n) < 0.5 if mode == "env+point" else np.zeros(n, dtype=bool)
    return [LightCondition(tuple(radius[i] * dirs[i]), float(inten[i]), bool(env[i])) for i in range(n)]


def _image_seed(seed: int, split: str, index: int) -> int:
    return (int(seed) * 1_000_003 + SPLITS.index(split) * 100_003 + index) & 0xFFFFFFFF


def generate_dataset(scene: SceneDescription, out_dir, mode: str = "point", counts=(170, 10, 30),
                     seed: int = 0, oracle: PathTracerConfig | None = None,
                     view: ViewConfig | None = None, threads: int = 1, png: bool = False) -> dict:
    """Render train/val/test images with the path tracer and write the manifest."""
    oracle = oracle or PathTracerConfig()
    view = view or ViewConfig()
    if len(counts) != 3 or min(counts) < 0 or sum(counts) == 0:
        raise DomainError("counts must be three non-negative numbers, not all zero")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for s, (split, n) in enumerate(zip(SPLITS, counts)):
        rng = np.random.default_rng([seed, s])
        cams = sample_cameras(n, view, rng)
        lights = sample_lights(n, split, mode, rng)
        jobs += [(split, i, cams[i], lights[i]) for i in range(n)]

    def work(job):
        split, i, cam, light = job
        cfg = PathTracerConfig(**{**oracle.__dict__, "seed": _image_seed(seed, split, i), "threads": 1})
        img = render_reference(scene, cam, light, cfg)
        save_image(out / "images" / split / str(i), img, png=png)
        return {"path": f"images/{split}/{i}.pfm", "split": split, "index": i,
                "camera": cam.to_json(), "light": light.to_json()}

    try:
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                records = list(ex.map(work, jobs))
        else:
            records = [work(j) for j in jobs]
        save_scene(scene, out / "scene.json")
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "scene": "scene.json",
            "scene_hash": scene_hash(scene),
            "mode": mode,
            "seed": int(seed),
            "counts": dict(zip(SPLITS, (int(c) for c in counts))),
            "view": view.to_json(),
            "oracle": {k: v for k, v in oracle.__dict__.items() if k not in ("threads", "seed")},
            "images": records,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    except BaseException:
        shutil.rmtree(out / "images", ignore_errors=True)
        for name in ("manifest.json", "scene.json"):
            (out / name).unlink(missing_ok=True)
        raise
    return manifest


@dataclass
class ViewRecord:
    camera: Camera
    light: LightCondition
    path: Path
    split: str
    index: int

    def image(self) -> np.ndarray:
        return read_pfm(self.path)


@dataclass
class Dataset:
    root: Path
    scene: SceneDescription
    manifest: dict
    records: list

    def split(self, name: str) -> list[ViewRecord]:
        return [r for r in self.records if r.split == name]


def load_dataset(root) -> Dataset:
    """Read and validate a dataset directory."""
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset manifest in {root}: {exc}") from exc
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DataError(f"{root}: unsupported manifest schema {manifest.get('schema')!r}")
    scene = load_scene(root / manifest.get("scene", "scene.json"))
    records, seen = [], set()
    for row in manifest.get("images", []):
        try:
            rec = ViewRecord(Camera.from_json(row["camera"]), LightCondition.from_json(row["light"]),
                             root / row["path"], row["split"], int(row["index"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{root}: malformed manifest row ({exc})") from exc
        if rec.split not in SPLITS:
            raise DataError(f"{root}: unknown split {rec.split!r}")
        if (rec.split, rec.index) in seen or rec.path in {r.path for r in records}:
            raise DataError(f"{root}: duplicate image record {row['path']}")
        if not rec.path.exists():
            raise DataError(f"{root}: missing image {row['path']}")
        seen.add((rec.split, rec.index))
        records.append(rec)
    return Dataset(root, scene, manifest, records)


# --------------------------------------------------------------------------
# metrics

def _ldr(img) -> np.ndarray:
    rgb = img.rgb if isinstance(img, HdrImage) else np.asarray(img, dtype=np.float64)
    return np.clip(tone_map(np.maximum(np.asarray(rgb, dtype=np.float64), 0.0)), 0.0, 1.0)


def psnr(a, b) -> float:
    """PSNR in dB of tone-mapped images (peak 1); inf when identical."""
    x, y = _ldr(a), _ldr(b)
    if x.shape != y.shape:
        raise DomainError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(a, b, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of tone-mapped luminance, 11x11 Gaussian window, data range 1."""
    x, y = luminance(_ldr(a)), luminance(_ldr(b))
    if x.shape != y.shape:
        raise DomainError(f"image shapes differ: {x.shape} vs {y.shape}")
    win = 11
    if min(x.shape) < win:
        raise DomainError(f"images must be at least {win}x{win} for SSIM")
    trunc = ((win - 1) // 2) / sigma
    filt = lambda z: gaussian_filter(z, sigma, truncate=trunc, mode="reflect")  # noqa: E731
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = k1 ** 2, k2 ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = (win - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def relative_rms(a, b) -> float:
    """||tonemap(a) - tonemap(b)|| / ||tonemap(b)||."""
    x, y = _ldr(a), _ldr(b)
    return float(np.linalg.norm(x - y) / np.linalg.norm(y))


def compare_sets(pred: dict, truth: dict) -> dict:
    """Mean PSNR/SSIM over matching keys of two {name: image} maps."""
    keys = sorted(truth)
    if not keys or set(keys) != set(pred):
        raise DataError("prediction and reference image sets do not match")
    ps = [psnr(pred[k], truth[k]) for k in keys]
    ss = [ssim(pred[k], truth[k]) for k in keys]
    return {"count": len(keys), "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
            "per_image": {k: {"psnr": p, "ssim": s} for k, p, s in zip(keys, ps, ss)}}
