"""The neural scene: feature, property, SH-radiance and visibility networks.

Positions are mapped into [-1/2, 1/2]^3 using the network bounds before the
positional encoding, so the lowest band is injective over the domain.  Light
positions are divided by ``light_scale`` and directions by 2 for the same
reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, DomainError
from .lights import LightCondition
from .mathkit import SH_MAX_BAND, ShCoefficients, encoded_size, positional_encode, sh_count
from .media import MediumSample

MANIFEST_SCHEMA = "nmnet/1"
G_LIMIT = 0.999


@dataclass(frozen=True)
class NetworkConfig:
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    l_max: int | None = 5
    feature_width: int = 256
    feature_depth: int = 8
    prop_width: int = 128
    sh_width: int = 128
    sh_depth: int = 8
    vis_width: int = 256
    vis_depth: int = 4
    pos_band: int = 8
    dir_band: int = 1
    light_band: int = 2
    global_g: bool = False
    i_ref: float = 900.0
    light_scale: float = 10.0
    init_sigma: float = 0.1

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64)
        if b.shape != (2, 3) or not np.all(b[1] > b[0]):
            raise DomainError("network bounds must be ((x0,y0,z0), (x1,y1,z1)) with x1 > x0")
        object.__setattr__(self, "bounds", tuple(tuple(float(v) for v in row) for row in b))
        if self.l_max is not None and not 0 <= self.l_max <= SH_MAX_BAND:
            raise DomainError(f"l_max must lie in [0, {SH_MAX_BAND}] or be None")
        if min(self.pos_band, self.dir_band, self.light_band) < 0:
            raise DomainError("encoding bands must be >= 0")
        if self.i_ref <= 0 or self.light_scale <= 0 or self.init_sigma <= 0:
            raise DomainError("i_ref, light_scale and init_sigma must be positive")

    @property
    def light_dim(self) -> int:
        return 2 + encoded_size(3, self.light_band) + 1


@dataclass(frozen=True)
class LightConditionEncoding:
    onehot: np.ndarray
    zeta: np.ndarray
    intensity: float

    def vector(self) -> np.ndarray:
        return np.concatenate([self.onehot, self.zeta, [self.intensity]])


def encode_light_condition(light: LightCondition, i_ref: float = 900.0, band: int = 2,
                           scale: float = 10.0) -> LightConditionEncoding:
    """Env indicator one-hot, encoded light position and intensity / i_ref."""
    onehot = np.array([0.0, 1.0]) if light.env else np.array([1.0, 0.0])
    zeta = positional_encode(light.pos / scale, band)
    return LightConditionEncoding(onehot, zeta, light.intensity / i_ref)


def encode_light_batch(pos, intensity, env, cfg: NetworkConfig) -> np.ndarray:
    """Per-row encodings for arrays of light positions, intensities and env flags."""
    env = np.asarray(env, dtype=bool)
    onehot = np.stack([~env, env], axis=-1).astype(np.float64)
    zeta = positional_encode(np.asarray(pos, dtype=np.float64) / cfg.light_scale, cfg.light_band)
    inten = (np.asarray(intensity, dtype=np.float64) / cfg.i_ref)[..., None]
    return np.concatenate([onehot, zeta, inten], axis=-1)


class NetworkSet:
    """F (features), R (properties), S (SH coefficients) and V (visibility)."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = cfg = config or NetworkConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        pe = encoded_size(3, cfg.pos_band)
        self.f_spec = ad.MlpSpec(pe, (cfg.feature_width,) * cfg.feature_depth)
        self.r_spec = ad.MlpSpec(cfg.feature_width, (cfg.prop_width,), 5)
        self.v_spec = ad.MlpSpec(pe + encoded_size(3, cfg.dir_band), (cfg.vis_width,) * cfg.vis_depth, 1)
        self.groups = {
            "F": ad.init_mlp(self.f_spec, rng, "F", dtype),
            "R": ad.init_mlp(self.r_spec, rng, "R", dtype),
        }
        if cfg.l_max is not None:
            self.s_spec = ad.MlpSpec(cfg.feature_width + cfg.light_dim, (cfg.sh_width,) * cfg.sh_depth,
                                     3 * sh_count(cfg.l_max))
            self.groups["S"] = ad.init_mlp(self.s_spec, rng, "S", dtype)
        else:
            self.s_spec = None
        self.groups["V"] = ad.init_mlp(self.v_spec, rng, "V", dtype)
        # sigma bias so that softplus gives init_sigma everywhere at start
        self.groups["R"][-1].value[0] = math.log(math.expm1(cfg.init_sigma))
        if cfg.global_g:
            self.groups["G"] = [ad.ParameterBlock("G.g", np.zeros(1, dtype=dtype))]

    # ------------------------------------------------------------------
    @property
    def blocks(self) -> list[ad.ParameterBlock]:
        return [b for g in self.groups.values() for b in g]

    @property
    def l_max(self) -> int | None:
        return self.config.l_max

    @property
    def sh_enabled(self) -> bool:
        return self.s_spec is not None

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.config.bounds)

    def zero_grad(self):
        for b in self.blocks:
            b.zero_grad()

    def astype(self, dtype) -> "NetworkSet":
        other = NetworkSet.__new__(NetworkSet)
        other.__dict__.update(self.__dict__)
        other.dtype = np.dtype(dtype)
        other.groups = {k: [ad.ParameterBlock(b.name, b.value.astype(dtype)) for b in g]
                        for k, g in self.groups.items()}
        return other

    def zero_density(self):
        """Make sigma vanish everywhere (vacuum)."""
        w, b = self.groups["R"][-2], self.groups["R"][-1]
        w.value[:, 0] = 0.0
        b.value[0] = -1e3

    def zero_sh(self):
        for b in self.groups.get("S", []):
            b.value[...] = 0.0

    # ------------------------------------------------------------------
    def encode_position(self, p) -> np.ndarray:
        lo, hi = self.bounds
        x = (np.asarray(p, dtype=np.float64) - 0.5 * (lo + hi)) / (hi - lo)
        return positional_encode(x, self.config.pos_band).astype(self.dtype)

    def encode_direction(self, d) -> np.ndarray:
        return positional_encode(0.5 * np.asarray(d, dtype=np.float64), self.config.dir_band).astype(self.dtype)

    def features(self, p, tape=None) -> ad.Var:
        return ad.mlp_forward(self.f_spec, self.groups["F"], self.encode_position(p), tape)

    def properties(self, feat, tape=None):
        """Returns Vars (sigma (P,), albedo (P, 3), g (P,))."""
        raw = ad.mlp_forward(self.r_spec, self.groups["R"], feat, tape)
        sigma = ad.softplus(raw[:, 0])
        albedo = ad.sigmoid(raw[:, 1:4])
        if self.config.global_g:
            gv = tape.param(self.groups["G"][0]) if tape is not None else ad.Var(self.groups["G"][0].value)
            g = ad.mul(ad.tanh(gv), G_LIMIT * np.ones(raw.shape[0], dtype=self.dtype))
        else:
            g = ad.mul(ad.tanh(raw[:, 4]), G_LIMIT)
        return sigma, albedo, g

    def sigma(self, p) -> np.ndarray:
        raw = ad.mlp_forward(self.r_spec, self.groups["R"], self.features(p), None)
        return np.logaddexp(0.0, raw.value[:, 0])

    def sh(self, feat, light_code, tape=None) -> ad.Var | None:
        """Raw coefficients (P, C, 3); ``light_code`` is (P, light_dim) or (light_dim,)."""
        if self.s_spec is None:
            return None
        n = ad.value(feat).shape[0]
        code = np.broadcast_to(np.asarray(light_code, dtype=self.dtype), (n, self.config.light_dim))
        raw = ad.mlp_forward(self.s_spec, self.groups["S"], ad.concat([feat, code], axis=1), tape)
        return ad.reshape(raw, (n, sh_count(self.config.l_max), 3))

    def visibility(self, p, d, tape=None) -> ad.Var:
        x = np.concatenate([self.encode_position(p), self.encode_direction(d)], axis=-1)
        return ad.sigmoid(ad.mlp_forward(self.v_spec, self.groups["V"], x, tape)[:, 0])

    # ------------------------------------------------------------------
    # point queries returning plain arrays

    def query_properties(self, p) -> MediumSample:
        p = np.asarray(p, dtype=np.float64)
        single = p.ndim == 1
        sigma, albedo, g = self.properties(self.features(np.atleast_2d(p)))
        s, a, gg = (np.asarray(v.value, dtype=np.float64) for v in (sigma, albedo, g))
        if single:
            return MediumSample(s[0], a[0], gg[0])
        return MediumSample(s, a, gg)

    def query_sh_coeffs(self, p, light: LightCondition):
        if self.s_spec is None:
            raise DomainError("this network set has no SH head")
        p = np.asarray(p, dtype=np.float64)
        cfg = self.config
        code = encode_light_condition(light, cfg.i_ref, cfg.light_band, cfg.light_scale).vector()
        out = np.asarray(self.sh(self.features(np.atleast_2d(p)), code).value, dtype=np.float64)
        return ShCoefficients(out[0]) if p.ndim == 1 else out

    def query_visibility(self, p, d) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.asarray(self.visibility(np.atleast_2d(p), np.atleast_2d(d)).value, dtype=np.float64)
        return out[0] if p.ndim == 1 else out

    # ------------------------------------------------------------------
    def manifest(self) -> dict:
        cfg = asdict(self.config)
        return {
            "schema": MANIFEST_SCHEMA,
            "config": cfg,
            "encoding_bands": {"position": self.config.pos_band, "direction": self.config.dir_band,
                               "light": self.config.light_band},
            "activations": {"sigma": "softplus", "albedo": "logistic", "g": f"{G_LIMIT}*tanh",
                            "visibility": "logistic", "hidden": "relu"},
            "global_g": self.config.global_g,
            "l_max": self.config.l_max,
        }

    def save(self, path, state: ad.AdamState | None = None, iteration: int = 0) -> None:
        """Checkpoint plus a JSON sidecar with the architecture."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(path, self.blocks, state, iteration)
        manifest_path(path).write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, path, dtype=np.float32):
        """Returns (net, AdamState, iteration)."""
        path = Path(path)
        side = manifest_path(path)
        if not path.exists() or not side.exists():
            raise DataError(f"missing checkpoint or manifest for {path}")
        try:
            man = json.loads(side.read_text())
            cfg = man["config"]
            cfg["bounds"] = tuple(tuple(r) for r in cfg["bounds"])
            net = cls(NetworkConfig(**cfg), seed=0, dtype=dtype)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{side}: bad network manifest ({exc})") from exc
        values, state, iteration = ad.load_checkpoint(path)
        for b in net.blocks:
            if b.name not in values or values[b.name].shape != b.shape:
                raise DataError(f"{path}: block {b.name} missing or mis-shaped")
            b.value = values[b.name].astype(dtype)
            b.grad = np.zeros_like(b.value)
        return net, state, iteration


def manifest_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".json")

