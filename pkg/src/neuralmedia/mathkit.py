"""Numerical kernels: phase function, real spherical harmonics, sphere sampling,
positional encoding, tone mapping and a counter-based random stream.

All functions broadcast over leading axes; directions are arrays with a
trailing axis of size 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

INV_4PI = 1.0 / (4.0 * math.pi)
SH_MAX_BAND = 9


# --------------------------------------------------------------------------
# counter-based random numbers

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 array arithmetic wraps silently
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


class CounterRNG:
    """Stateless random stream: every draw is a hash of (seed, counters...).

    The same counters always produce the same number, so results do not depend
    on evaluation order or on how work is split between threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _mix64(np.atleast_1d(np.uint64(self.seed)) + _GOLDEN)

    def bits(self, *counters) -> np.ndarray:
        h = self._key
        for c in counters:
            c = np.asarray(c)
            if c.dtype != np.uint64:
                c = c.astype(np.int64).astype(np.uint64)
            h = _mix64(np.atleast_1d(h ^ (c + _GOLDEN)))
        return h

    def uniforms(self, stream, step, ndim: int) -> np.ndarray:
        """(len(stream), ndim) uniforms for per-path streams at one step."""
        base = self.bits(stream, step)
        dims = np.arange(ndim, dtype=np.uint64) + _GOLDEN
        h = _mix64(base[:, None] ^ dims[None, :])
        return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, *counters) -> np.ndarray:
        """Uniform doubles in [0, 1) keyed by the broadcast counters."""
        return (self.bits(*counters) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def split(self, *counters) -> "CounterRNG":
        return CounterRNG(int(self.bits(*counters)[0]))


# --------------------------------------------------------------------------
# directions

def normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def orthonormal_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two tangents completing a right-handed frame around unit vectors n."""
    # Duff et al. 2017, branchless
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    s = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, s


def uniform_sphere(u1, u2) -> np.ndarray:
    """Area-preserving map z = 1 - 2 u1, phi = 2 pi u2."""
    z = 1.0 - 2.0 * np.asarray(u1, dtype=np.float64)
    phi = 2.0 * math.pi * np.asarray(u2, dtype=np.float64)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def sample_sphere(mode: str, n: int, rng: np.random.Generator | None = None):
    """Draw ``n`` directions on the unit sphere; returns (dirs, pdf).

    ``stratified`` uses an equal-area grid of rows x cols cells in (z, phi),
    with rows the largest divisor of n not above sqrt(n). Samples are
    jittered inside their cell when ``rng`` is given and centred otherwise.
    """
    n = int(n)
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n}")
    if mode == "uniform":
        if rng is None:
            raise DomainError("uniform sampling needs a random generator")
        u = rng.random((n, 2))
        dirs = uniform_sphere(u[:, 0], u[:, 1])
    elif mode == "stratified":
        rows = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
        cols = n // rows
        jitter = rng.random((rows, cols, 2)) if rng is not None else np.full((rows, cols, 2), 0.5)
        i = np.arange(rows)[:, None]
        j = np.arange(cols)[None, :]
        u1 = (i + jitter[..., 0]) / rows
        u2 = (j + jitter[..., 1]) / cols
        dirs = uniform_sphere(u1.ravel(), u2.ravel())
    else:
        raise DomainError(f"unknown sphere sampling mode {mode!r}")
    return dirs, np.full(n, INV_4PI)


# --------------------------------------------------------------------------
# Henyey-Greenstein

def _check_g(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if np.any(~(np.abs(g) < 1.0)):
        raise DomainError("asymmetry parameter must satisfy |g| < 1")
    return g


def hg_phase(cos_theta, g) -> np.ndarray:
    """HG value from the cosine between the two outward-pointing directions."""
    g = np.asarray(g)
    denom = 1.0 + g * g + 2.0 * g * cos_theta
    return INV_4PI * (1.0 - g * g) / (denom * np.sqrt(denom))


def hg_eval(w_o, w_i, g) -> np.ndarray:
    """Phase function for directions that both point away from the scattering point.

    Forward scattering (g > 0) peaks at w_o = -w_i.
    """
    g = _check_g(g)
    cos_theta = np.sum(np.asarray(w_o) * np.asarray(w_i), axis=-1)
    return hg_phase(cos_theta, g)


def hg_sample(w_o, g, u1, u2):
    """Importance-sample w_i proportional to hg_eval(w_o, ., g).

    Exact inverse CDF in cos(theta) = w_o . w_i, uniform azimuth.
    Returns (w_i, pdf).
    """
    g = _check_g(g)
    w_o = np.asarray(w_o, dtype=np.float64)
    u1 = np.asarray(u1, dtype=np.float64)
    g_safe = np.where(np.abs(g) < 1e-6, 1.0, g)
    s = ((1.0 - g * g) / (1.0 + g - 2.0 * g * u1)) ** 2
    mu = np.where(np.abs(g) < 1e-6, 2.0 * u1 - 1.0, (s - 1.0 - g * g) / (2.0 * g_safe))
    mu = np.clip(mu, -1.0, 1.0)
    sin_t = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    phi = 2.0 * math.pi * np.asarray(u2, dtype=np.float64)
    t, b = orthonormal_basis(w_o)
    w_i = (mu[..., None] * w_o
           + (sin_t * np.cos(phi))[..., None] * t
           + (sin_t * np.sin(phi))[..., None] * b)
    w_i = normalize(w_i)
    return w_i, hg_eval(w_o, w_i, g)


# --------------------------------------------------------------------------
# real spherical harmonics

def sh_count(l_max: int) -> int:
    return (l_max + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) + m


@lru_cache(maxsize=None)
def _sh_norms(l_max: int) -> np.ndarray:
    k = np.zeros(sh_count(l_max))
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            val = math.sqrt((2 * l + 1) / (4 * math.pi)
                            * math.factorial(l - am) / math.factorial(l + am))
            k[sh_index(l, m)] = val * (math.sqrt(2.0) if m != 0 else 1.0)
    return k


def sh_basis(l_max: int, w) -> np.ndarray:
    """Real SH basis up to band ``l_max`` at unit directions ``w``.

    Entry l(l+1)+m holds Y_l^m; associated Legendre functions carry the
    Condon-Shortley phase.
    """
    l_max = int(l_max)
    if l_max < 0:
        raise DomainError("l_max must be non-negative")
    if l_max > SH_MAX_BAND:
        raise DomainError(f"l_max above {SH_MAX_BAND} is not supported")
    w = np.asarray(w, dtype=np.float64)
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    ct = np.clip(z, -1.0, 1.0)
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None))
    phi = np.arctan2(y, x)
    out = np.empty(w.shape[:-1] + (sh_count(l_max),))

    # P[l][m] for m >= 0 by the standard upward recurrences
    p_mm = np.ones_like(ct)
    for m in range(l_max + 1):
        if m > 0:
            p_mm = -(2 * m - 1) * st * p_mm
        cos_m = np.cos(m * phi)
        sin_m = np.sin(m * phi)
        p_prev2, p_prev = None, p_mm
        for l in range(m, l_max + 1):
            if l == m:
                p_l = p_mm
            elif l == m + 1:
                p_l = (2 * m + 1) * ct * p_mm
            else:
                p_l = ((2 * l - 1) * ct * p_prev - (l + m - 1) * p_prev2) / (l - m)
            if l > m:
                p_prev2, p_prev = p_prev, p_l
            if m == 0:
                out[..., sh_index(l, 0)] = p_l
            else:
                out[..., sh_index(l, m)] = cos_m * p_l
                out[..., sh_index(l, -m)] = sin_m * p_l
    out *= _sh_norms(l_max)
    return out


@dataclass(frozen=True)
class ShCoefficients:
    """RGB coefficient block, ``coeffs[l(l+1)+m] = (r, g, b)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        n = c.shape[0] if c.ndim == 2 else -1
        l_max = math.isqrt(max(n, 0)) - 1
        if c.ndim != 2 or c.shape[1] != 3 or (l_max + 1) ** 2 != n:
            raise DomainError(f"SH block must have shape ((l+1)^2, 3), got {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def l_max(self) -> int:
        return math.isqrt(self.coeffs.shape[0]) - 1


def sh_radiance(c, w) -> np.ndarray:
    """Clamped RGB radiance max(0, sum_lm c_lm Y_lm(w))."""
    coeffs = c.coeffs if isinstance(c, ShCoefficients) else np.asarray(c, dtype=np.float64)
    l_max = math.isqrt(coeffs.shape[-2]) - 1
    y = sh_basis(l_max, w)
    return np.maximum(0.0, y @ coeffs)


def sh_project_lstsq(dirs: np.ndarray, values: np.ndarray, l_max: int) -> np.ndarray:
    """Least-squares SH coefficients ((l+1)^2, C) fitting ``values`` (n, C)."""
    y = sh_basis(l_max, dirs)
    coeffs, *_ = np.linalg.lstsq(y, values, rcond=None)
    return coeffs


# --------------------------------------------------------------------------
# encodings and tone mapping

def positional_encode(x, max_band: int) -> np.ndarray:
    """NeRF-style features (sin 2^b pi x, cos 2^b pi x), b = 0..max_band.

    The last axis holds the D input coordinates; output has D*2*(max_band+1)
    entries laid out per coordinate, bands ascending, sin before cos.
    """
    if max_band < 0:
        raise DomainError("max_band must be >= 0")
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    freqs = (2.0 ** np.arange(max_band + 1) * math.pi).astype(dtype)
    arg = x[..., :, None].astype(dtype) * freqs
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return enc.reshape(x.shape[:-1] + (-1,))


def encoded_size(dims: int, max_band: int) -> int:
    return dims * 2 * (max_band + 1)


def tone_map(L):
    """Range compression L / (1 + L)."""
    L = np.asarray(L)
    if np.any(L < 0):
        raise DomainError("tone_map expects non-negative radiance")
    return L / (1.0 + L)


def luminance(rgb) -> np.ndarray:
    rgb = np.asarray(rgb)
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]
