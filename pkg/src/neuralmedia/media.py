"""Ground-truth participating media: analytic and gridded fields, scene
descriptions, transmittance, ray bounds, editing and composition.

Point queries are vectorised: ``p`` has a trailing axis of size 3.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, ResourceError
from .lights import EnvLight, LightCondition
from .mathkit import CounterRNG

GRID_MAGIC = b"NMGRID01"
GRID_HEADER = struct.Struct("<8s4I8x")  # 32 bytes, last 8 reserved
GRID_CHANNELS = 5  # sigma, aR, aG, aB, g
DEFAULT_GRID_CAP = 2 << 30  # bytes


@dataclass
class MediumSample:
    sigma: np.ndarray   # (...,)
    albedo: np.ndarray  # (..., 3)
    g: np.ndarray       # (...,)


# --------------------------------------------------------------------------
# placement

@dataclass(frozen=True)
class Transform:
    """Local-to-world placement p_w = scale * R p_l + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DomainError("transform needs a 3x3 rotation and a 3-vector translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or not self.scale > 0:
            raise DomainError("transform must be a rotation with positive scale")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and np.array_equal(self.rotation, np.eye(3))
                and not np.any(self.translation))

    def point_to_local(self, p):
        return ((np.asarray(p) - self.translation) @ self.rotation) / self.scale

    def dir_to_local(self, d):
        # not renormalised: ray parameters t stay world distances
        return (np.asarray(d) @ self.rotation) / self.scale

    def point_to_world(self, p):
        return self.scale * (np.asarray(p) @ self.rotation.T) + self.translation

    def then(self, outer: "Transform") -> "Transform":
        """The placement ``outer(self(p))``."""
        return Transform(outer.rotation @ self.rotation,
                         outer.scale * (outer.rotation @ self.translation) + outer.translation,
                         outer.scale * self.scale)

    def to_json(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "scale": self.scale}

    @classmethod
    def from_json(cls, obj) -> "Transform":
        if obj is None:
            return cls()
        return cls(np.asarray(obj.get("rotation", np.eye(3))),
                   np.asarray(obj.get("translation", np.zeros(3))), obj.get("scale", 1.0))


# --------------------------------------------------------------------------
# fields

def _as_bounds(bounds) -> np.ndarray:
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape != (2, 3) or np.any(b[1] <= b[0]):
        raise DomainError(f"bounds must be [[lo...], [hi...]] with lo < hi, got {bounds}")
    return b


def _inside(p, bounds) -> np.ndarray:
    return np.all((p >= bounds[0]) & (p <= bounds[1]), axis=-1)


def _check_props(albedo, g):
    albedo = np.asarray(albedo, dtype=np.float64)
    if albedo.shape != (3,) or np.any((albedo < 0) | (albedo > 1)):
        raise DomainError("albedo must be three values in [0, 1]")
    if not abs(g) < 1.0:
        raise DomainError("asymmetry g must satisfy |g| < 1")
    return albedo


class MediumField:
    """Base class; subclasses define local-space sampling inside ``bounds``."""

    kind = "abstract"
    bounds: np.ndarray

    def sample(self, p) -> MediumSample:
        raise NotImplementedError

    @property
    def majorant(self) -> float:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class HomogeneousField(MediumField):
    """Constant medium filling its box, or the sphere inscribed in it."""

    sigma: float
    albedo: np.ndarray
    g: float = 0.0
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))
    shape: str = "box"
    kind = "homogeneous"

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError("sigma must be >= 0")
        if self.shape not in ("box", "sphere"):
            raise DomainError(f"unknown shape {self.shape!r}")
        object.__setattr__(self, "albedo", _check_props(self.albedo, self.g))
        object.__setattr__(self, "bounds", _as_bounds(self.bounds))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bounds[0] + self.bounds[1])

    @property
    def radius(self) -> float:
        return float(0.5 * np.min(self.bounds[1] - self.bounds[0]))

    def contains(self, p) -> np.ndarray:
        if self.shape == "sphere":
            return np.sum((p - self.center) ** 2, axis=-1) <= self.radius ** 2
        return _inside(p, self.bounds)

    def sample(self, p) -> MediumSample:
        inside = self.contains(p)
        sigma = np.where(inside, self.sigma, 0.0)
        return MediumSample(sigma, np.where(inside[..., None], self.albedo, 0.0),
                            np.where(inside, self.g, 0.0))

    @property
    def majorant(self) -> float:
        return float(self.sigma)

    def segment_fraction(self, p0, p1):
        """Parametric [ta, tb] of the segment p0->p1 lying inside the shape."""
        d = p1 - p0
        if self.shape == "sphere":
            oc = p0 - self.center
            a = np.sum(d * d, axis=-1)
            b = np.sum(oc * d, axis=-1)
            c = np.sum(oc * oc, axis=-1) - self.radius ** 2
            disc = b * b - a * c
            ok = (disc > 0) & (a > 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            a_safe = np.where(a > 0, a, 1.0)
            ta = np.where(ok, (-b - sq) / a_safe, 1.0)
            tb = np.where(ok, (-b + sq) / a_safe, 0.0)
        else:
            ta, tb = _slab(p0, d, self.bounds)
        return np.clip(ta, 0.0, 1.0), np.clip(tb, 0.0, 1.0)


def _slab(o, d, bounds):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds[0] - o) * inv
        t1 = (bounds[1] - o) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> empty
    par = d == 0
    inside_par = (o >= bounds[0]) & (o <= bounds[1])
    lo = np.where(par, np.where(inside_par, -np.inf, np.inf), np.minimum(t0, t1))
    hi = np.where(par, np.where(inside_par, np.inf, -np.inf), np.maximum(t0, t1))
    return np.max(lo, axis=-1), np.min(hi, axis=-1)


def _value_noise(rng: CounterRNG, p):
    cell = np.floor(p)
    f = p - cell
    f = f * f * (3.0 - 2.0 * f)
    c = cell.astype(np.int64)
    out = 0.0
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                v = rng.uniform(c[..., 0] + dx, c[..., 1] + dy, c[..., 2] + dz).reshape(f.shape[:-1])
                out = out + wx * wy * wz * (2.0 * v - 1.0)
    return out


@dataclass(frozen=True, eq=False)
class ProceduralField(MediumField):
    """Clamped fractal-noise density inside the sphere inscribed in ``bounds``."""

    sigma_scale: float
    albedo: np.ndarray
    g: float = 0.0
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))
    frequency: float = 2.0
    octaves: int = 4
    seed: int = 7
    kind = "procedural"

    def __post_init__(self):
        if not self.sigma_scale >= 0:
            raise DomainError("sigma_scale must be >= 0")
        object.__setattr__(self, "albedo", _check_props(self.albedo, self.g))
        object.__setattr__(self, "bounds", _as_bounds(self.bounds))

    def density(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        center = 0.5 * (self.bounds[0] + self.bounds[1])
        radius = 0.5 * np.min(self.bounds[1] - self.bounds[0])
        q = (p - center) / radius
        r2 = np.sum(q * q, axis=-1)
        rng = CounterRNG(self.seed)
        n = np.zeros(p.shape[:-1])
        amp, freq = 0.5, self.frequency
        for _ in range(self.octaves):
            n = n + amp * _value_noise(rng, q * freq)
            amp *= 0.5
            freq *= 2.0
        d = np.clip(1.0 - r2 + n, 0.0, 1.0)
        return np.where(r2 < 1.0, self.sigma_scale * d, 0.0)

    def sample(self, p) -> MediumSample:
        sigma = self.density(p)
        inside = sigma > 0
        return MediumSample(sigma, np.where(inside[..., None], self.albedo, 0.0),
                            np.where(inside, self.g, 0.0))

    @property
    def majorant(self) -> float:
        return float(self.sigma_scale)


@dataclass(frozen=True, eq=False)
class GridField(MediumField):
    """Lattice of (sigma, aR, aG, aB, g) at voxel centres, trilinear in between."""

    data: np.ndarray  # (nx, ny, nz, 5) float32
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))
    kind = "grid"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 4 or d.shape[3] != GRID_CHANNELS or min(d.shape[:3]) < 2:
            raise DomainError(f"grid must be (nx,ny,nz,5) with every n >= 2, got {d.shape}")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "bounds", _as_bounds(self.bounds))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    def sample(self, p) -> MediumSample:
        p = np.asarray(p, dtype=np.float64)
        res = np.array(self.resolution)
        u = (p - self.bounds[0]) / (self.bounds[1] - self.bounds[0]) * res - 0.5
        # snap near-integers so voxel-centre queries return lattice values exactly
        r = np.round(u)
        u = np.where(np.abs(u - r) < 1e-9, r, u)
        u = np.clip(u, 0.0, res - 1)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        f = u - i0
        out = 0.0
        for dx in (0, 1):
            wx = f[..., 0] if dx else 1.0 - f[..., 0]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                for dz in (0, 1):
                    wz = f[..., 2] if dz else 1.0 - f[..., 2]
                    v = self.data[i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz].astype(np.float64)
                    out = out + (wx * wy * wz)[..., None] * v
        inside = _inside(p, self.bounds)
        out = np.where(inside[..., None], out, 0.0)
        return MediumSample(out[..., 0], out[..., 1:4], out[..., 4])

    @property
    def majorant(self) -> float:
        return float(self.data[..., 0].max())


# --------------------------------------------------------------------------
# scenes

@dataclass(frozen=True)
class Instance:
    field: MediumField
    transform: Transform = field(default_factory=Transform)


@dataclass(frozen=True)
class SceneDescription:
    instances: tuple
    background: tuple = (0.0, 0.0, 0.0)
    lights: dict = field(default_factory=dict)
    env: EnvLight = field(default_factory=EnvLight)
    camera: object = None

    def __post_init__(self):
        if len(self.instances) == 0:
            raise DomainError("a scene needs at least one medium instance")
        object.__setattr__(self, "instances", tuple(
            i if isinstance(i, Instance) else Instance(*i) for i in self.instances))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))

    @property
    def majorant(self) -> float:
        return float(sum(i.field.majorant for i in self.instances))

    def world_bounds(self) -> np.ndarray:
        """Axis-aligned world box enclosing every instance."""
        lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
        for inst in self.instances:
            b = inst.field.bounds
            corners = np.array([[b[i][0], b[j][1], b[k][2]]
                                for i in (0, 1) for j in (0, 1) for k in (0, 1)])
            w = inst.transform.point_to_world(corners)
            lo, hi = np.minimum(lo, w.min(0)), np.maximum(hi, w.max(0))
        return np.stack([lo, hi])


def single_field_scene(fld: MediumField, **kw) -> SceneDescription:
    return SceneDescription((Instance(fld, Transform()),), **kw)


def medium_at(scene: SceneDescription, p) -> MediumSample:
    """Union of all instances: sigma adds, albedo and g are sigma-weighted."""
    p = np.asarray(p, dtype=np.float64)
    sigma = np.zeros(p.shape[:-1])
    sa = np.zeros(p.shape[:-1] + (3,))
    sg = np.zeros(p.shape[:-1])
    for inst in scene.instances:
        s = inst.field.sample(inst.transform.point_to_local(p))
        sigma = sigma + s.sigma
        sa = sa + s.sigma[..., None] * s.albedo
        sg = sg + s.sigma * s.g
    if len(scene.instances) == 1:
        return MediumSample(sigma, s.albedo, s.g)
    with np.errstate(invalid="ignore", divide="ignore"):
        nz = sigma > 0
        albedo = np.where(nz[..., None], sa / np.where(nz, sigma, 1.0)[..., None], 0.0)
        g = np.where(nz, sg / np.where(nz, sigma, 1.0), 0.0)
    return MediumSample(sigma, albedo, g)


def _all_homogeneous(scene) -> bool:
    return all(isinstance(i.field, HomogeneousField) for i in scene.instances)


def optical_depth(scene: SceneDescription, p0, p1, steps: int = 64) -> np.ndarray:
    """Integral of sigma along p0->p1: exact for homogeneous scenes, midpoint otherwise."""
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    length = np.linalg.norm(p1 - p0, axis=-1)
    if _all_homogeneous(scene):
        tau = np.zeros(length.shape)
        for inst in scene.instances:
            a = inst.transform.point_to_local(p0)
            b = inst.transform.point_to_local(p1)
            ta, tb = inst.field.segment_fraction(a, b)
            tau = tau + inst.field.sigma * np.maximum(tb - ta, 0.0) * length
        return tau
    if steps < 1:
        raise DomainError("transmittance needs at least one step")
    tau = np.zeros(length.shape)
    for j in range(steps):
        t = (j + 0.5) / steps
        tau = tau + medium_at(scene, p0 + t * (p1 - p0)).sigma
    return tau * length / steps


def transmittance(scene: SceneDescription, p0, p1, steps: int = 64) -> np.ndarray:
    """exp(-integral of sigma) along the segment p0->p1."""
    if steps < 1:
        raise DomainError("transmittance needs at least one step")
    return np.exp(-optical_depth(scene, p0, p1, steps))


def ray_bounds_batch(scene: SceneDescription, o, d):
    """Vectorised ray/box union test: returns (t_near, t_far, hit)."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    near = np.full(o.shape[:-1], np.inf)
    far = np.full(o.shape[:-1], -np.inf)
    for inst in scene.instances:
        ol = inst.transform.point_to_local(o)
        dl = inst.transform.dir_to_local(d)
        t0, t1 = _slab(ol, dl, inst.field.bounds)
        t0 = np.maximum(t0, 0.0)
        ok = t1 > t0
        near = np.where(ok, np.minimum(near, t0), near)
        far = np.where(ok, np.maximum(far, t1), far)
    hit = far > near
    return np.where(hit, near, 0.0), np.where(hit, far, 0.0), hit


def ray_bounds(scene: SceneDescription, origin, direction):
    """(t_near, t_far) of a single ray against the scene, or None on a miss."""
    n, f, hit = ray_bounds_batch(scene, np.asarray(origin)[None], np.asarray(direction)[None])
    return (float(n[0]), float(f[0])) if hit[0] else None


# --------------------------------------------------------------------------
# grids, edits, composition

def voxel_centers(bounds, resolution) -> np.ndarray:
    bounds = _as_bounds(bounds)
    axes = [bounds[0][k] + (np.arange(n) + 0.5) * (bounds[1][k] - bounds[0][k]) / n
            for k, n in enumerate(resolution)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def extract_grids(source, resolution, bounds=None, memory_cap: int = DEFAULT_GRID_CAP,
                  chunk: int = 1 << 16) -> GridField:
    """Sample a field (or anything with ``query_properties``) at voxel centres."""
    res = tuple(int(n) for n in resolution)
    if len(res) != 3 or min(res) < 2:
        raise DomainError(f"grid resolution must be three values >= 2, got {resolution}")
    nbytes = int(np.prod(res, dtype=np.int64)) * GRID_CHANNELS * 4
    if nbytes > memory_cap:
        raise ResourceError(f"grid of {res} needs {nbytes} bytes, cap is {memory_cap}")
    if bounds is None:
        bounds = source.bounds
    pts = voxel_centers(bounds, res).reshape(-1, 3)
    query = source.query_properties if hasattr(source, "query_properties") else source.sample
    out = np.empty((pts.shape[0], GRID_CHANNELS), dtype=np.float32)
    for s in range(0, pts.shape[0], chunk):
        m = query(pts[s:s + chunk])
        out[s:s + chunk, 0] = m.sigma
        out[s:s + chunk, 1:4] = m.albedo
        out[s:s + chunk, 4] = m.g
    return GridField(out.reshape(res + (GRID_CHANNELS,)), bounds)


_CHANNELS = {"r": 0, "g": 1, "b": 2}


def apply_edit(fld: MediumField, edit) -> MediumField:
    """Return an edited copy: ``("density", k)`` or ``("albedo", channel, k)``."""
    op = edit[0]
    k = float(edit[-1])
    if not k >= 0:
        raise DomainError("edit scale must be >= 0")
    if op == "density":
        if isinstance(fld, GridField):
            data = fld.data.copy()
            data[..., 0] *= np.float32(k)
            return GridField(data, fld.bounds)
        if isinstance(fld, HomogeneousField):
            return replace(fld, sigma=fld.sigma * k)
    elif op == "albedo":
        ch = edit[1]
        if ch not in _CHANNELS:
            raise DomainError(f"unknown albedo channel {ch!r}")
        c = _CHANNELS[ch]
        if isinstance(fld, GridField):
            data = fld.data.copy()
            data[..., 1 + c] = np.clip(data[..., 1 + c] * np.float32(k), 0.0, 1.0)
            return GridField(data, fld.bounds)
        if isinstance(fld, HomogeneousField):
            a = fld.albedo.copy()
            a[c] = min(a[c] * k, 1.0)
            return replace(fld, albedo=a)
    else:
        raise DomainError(f"unknown edit {op!r}")
    raise DomainError(f"edits are not supported on {fld.kind} fields")


def parse_edit(text: str):
    """``density=0.5`` or ``albedo.r=2`` -> edit tuple."""
    try:
        key, val = text.split("=")
        if key == "density":
            return ("density", float(val))
        head, ch = key.split(".")
        if head == "albedo":
            return ("albedo", ch, float(val))
    except ValueError:
        pass
    raise DomainError(f"cannot parse edit {text!r}")


def compose(scenes) -> SceneDescription:
    """Union of placed scenes; lights, env, background and camera come from the first."""
    scenes = list(scenes)
    if not scenes:
        raise DomainError("compose needs at least one scene")
    instances = []
    for sc, tf in scenes:
        tf = tf if tf is not None else Transform()
        for inst in sc.instances:
            instances.append(Instance(inst.field, inst.transform.then(tf)))
    host = scenes[0][0]
    return replace(host, instances=tuple(instances))


# --------------------------------------------------------------------------
# file formats

def write_grid(path, grid: GridField) -> None:
    nx, ny, nz = grid.resolution
    with open(path, "wb") as f:
        f.write(GRID_HEADER.pack(GRID_MAGIC, nx, ny, nz, GRID_CHANNELS))
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_grid(path, bounds) -> GridField:
    raw = Path(path).read_bytes()
    if len(raw) < GRID_HEADER.size:
        raise DataError(f"{path}: truncated grid header")
    magic, nx, ny, nz, nc = GRID_HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise DataError(f"{path}: bad grid magic {magic!r}")
    if nc != GRID_CHANNELS:
        raise DataError(f"{path}: expected {GRID_CHANNELS} channels, found {nc}")
    count = nx * ny * nz * nc
    if len(raw) != GRID_HEADER.size + 4 * count:
        raise DataError(f"{path}: payload size does not match header")
    data = np.frombuffer(raw, dtype="<f4", offset=GRID_HEADER.size).reshape(nx, ny, nz, nc)
    return GridField(data.astype(np.float32), bounds)


def field_to_json(fld: MediumField, grid_file: str | None = None) -> dict:
    base = {"kind": fld.kind, "bounds": fld.bounds.tolist()}
    if isinstance(fld, HomogeneousField):
        base.update(sigma=fld.sigma, albedo=fld.albedo.tolist(), g=fld.g, shape=fld.shape)
    elif isinstance(fld, ProceduralField):
        base.update(sigma_scale=fld.sigma_scale, albedo=fld.albedo.tolist(), g=fld.g,
                    frequency=fld.frequency, octaves=fld.octaves, seed=fld.seed)
    elif isinstance(fld, GridField):
        if grid_file is None:
            raise DomainError("grid fields need a payload file name")
        base.update(file=grid_file)
    return base


def field_from_json(obj, base_dir: Path) -> MediumField:
    kind = obj.get("kind")
    bounds = obj.get("bounds", [[-1.0] * 3, [1.0] * 3])
    if kind == "homogeneous":
        return HomogeneousField(float(obj["sigma"]), np.asarray(obj["albedo"]), float(obj.get("g", 0.0)),
                                np.asarray(bounds), obj.get("shape", "box"))
    if kind == "procedural":
        return ProceduralField(float(obj["sigma_scale"]), np.asarray(obj["albedo"]),
                               float(obj.get("g", 0.0)), np.asarray(bounds),
                               float(obj.get("frequency", 2.0)), int(obj.get("octaves", 4)),
                               int(obj.get("seed", 7)))
    if kind == "grid":
        return read_grid(base_dir / obj["file"], np.asarray(bounds))
    raise DataError(f"unknown medium kind {kind!r}")


def scene_to_json(scene: SceneDescription, grid_names=None) -> dict:
    """Serialisable dict; grid instances reference ``grid_names[i]``."""
    insts = []
    for i, inst in enumerate(scene.instances):
        name = grid_names[i] if grid_names and i in grid_names else None
        entry = field_to_json(inst.field, name)
        entry["transform"] = inst.transform.to_json()
        insts.append(entry)
    out = {"schema": "nmscene/1", "background": list(scene.background),
           "env": scene.env.to_json(),
           "lights": {k: v.to_json() for k, v in scene.lights.items()},
           "instances": insts}
    if scene.camera is not None:
        out["camera"] = scene.camera.to_json()
    return out


def save_scene(scene: SceneDescription, path) -> None:
    """Write ``path`` (JSON) plus one ``.nmgrid`` payload per grid instance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = {}
    for i, inst in enumerate(scene.instances):
        if isinstance(inst.field, GridField):
            names[i] = f"{path.stem}_{i}.nmgrid"
            write_grid(path.parent / names[i], inst.field)
    path.write_text(json.dumps(scene_to_json(scene, names), indent=2))


def load_scene(path) -> SceneDescription:
    from .camera import Camera

    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scene {path}: {exc}") from exc
    try:
        insts = tuple(Instance(field_from_json(e, path.parent), Transform.from_json(e.get("transform")))
                      for e in obj["instances"])
        lights = {k: LightCondition.from_json(v) for k, v in obj.get("lights", {}).items()}
        env = EnvLight.from_json(obj["env"]) if "env" in obj else EnvLight()
        cam = Camera.from_json(obj["camera"]) if "camera" in obj else None
        return SceneDescription(insts, tuple(obj.get("background", (0, 0, 0))), lights, env, cam)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid scene {path}: {exc}") from exc


def scene_hash(scene: SceneDescription) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(scene_to_json(scene, {i: f"grid{i}" for i in range(len(scene.instances))}),
                        sort_keys=True).encode())
    for inst in scene.instances:
        if isinstance(inst.field, GridField):
            h.update(inst.field.data.tobytes())
    return h.hexdigest()
