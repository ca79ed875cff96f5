"""Linear-radiance RGB rasters and their PFM / PNG encodings."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError
from .mathkit import tone_map


@dataclass
class HdrImage:
    """(H, W, 3) float32 radiance, optionally split into direct/indirect layers."""

    rgb: np.ndarray
    direct: np.ndarray | None = None
    indirect: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DomainError(f"image must be (H, W, 3), got {self.rgb.shape}")
        for name in ("direct", "indirect"):
            layer = getattr(self, name)
            if layer is not None:
                layer = np.asarray(layer, dtype=np.float32)
                if layer.shape != self.rgb.shape:
                    raise DomainError(f"{name} layer shape {layer.shape} != {self.rgb.shape}")
                setattr(self, name, layer)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @classmethod
    def from_layers(cls, direct, indirect) -> "HdrImage":
        direct = np.asarray(direct, dtype=np.float32)
        indirect = np.asarray(indirect, dtype=np.float32)
        return cls(direct + indirect, direct, indirect)


def write_pfm(path, rgb) -> None:
    """Little-endian colour PFM (scale -1), rows stored bottom to top."""
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DomainError("PFM writer expects an (H, W, 3) array")
    if not np.all(np.isfinite(rgb)):
        raise DomainError(f"refusing to write non-finite pixels to {path}")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb[::-1], dtype="<f4").tobytes())


_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into an (H, W, 3) float32 array.

    Big-endian files (positive scale) are converted; greyscale ``Pf`` files
    are replicated to three channels.
    """
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise DataError(f"{path}: malformed PFM header")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if scale == 0:
        raise DataError(f"{path}: PFM scale must be non-zero")
    ch = 3 if kind == b"PF" else 1
    n = w * h * ch
    body = raw[m.end():]
    if len(body) < 4 * n:
        raise DataError(f"{path}: truncated PFM payload ({len(body)} of {4 * n} bytes)")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body[:4 * n], dtype=dtype).astype(np.float32).reshape(h, w, ch)
    data = data[::-1]
    if ch == 1:
        data = np.repeat(data, 3, axis=2)
    return np.ascontiguousarray(data)


def write_png(path, rgb) -> None:
    """8-bit preview: tone map, then gamma 1/2.2."""
    from PIL import Image

    ldr = np.power(tone_map(np.maximum(np.asarray(rgb, dtype=np.float64), 0.0)), 1.0 / 2.2)
    Image.fromarray(np.clip(np.round(ldr * 255.0), 0, 255).astype(np.uint8)).save(path)


def save_image(stem, image: HdrImage, png: bool = False, decompose: bool = False) -> list[Path]:
    """Write ``stem.pfm`` (plus ``_direct``/``_indirect`` layers when asked)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = [stem.with_suffix(".pfm")]
    write_pfm(written[0], image.rgb)
    if png:
        write_png(stem.with_suffix(".png"), image.rgb)
    if decompose:
        if image.direct is None or image.indirect is None:
            raise DomainError("image carries no decomposition layers")
        for name in ("direct", "indirect"):
            p = stem.parent / f"{stem.name}_{name}.pfm"
            write_pfm(p, getattr(image, name))
            written.append(p)
    return written


def load_image(stem) -> HdrImage:
    """Read ``stem.pfm`` and its layers when present."""
    stem = Path(stem)
    base = stem if stem.suffix == ".pfm" else stem.with_suffix(".pfm")
    rgb = read_pfm(base)
    layers = {}
    for name in ("direct", "indirect"):
        p = base.parent / f"{base.stem}_{name}.pfm"
        if p.exists():
            layers[name] = read_pfm(p)
    return HdrImage(rgb, layers.get("direct"), layers.get("indirect"))
