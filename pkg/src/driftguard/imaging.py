"""RGB8 raster model, binary PPM codec, and the drift transforms.

Images are immutable: the pixel array is marked read-only on construction and
every transform returns a new :class:`ImageBuffer`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng

DRIFT_KINDS = ("gaussian_noise", "brightness", "tilt")


class PPMError(ValueError):
    """Base class for PPM decoding failures."""


class PPMMagicError(PPMError):
    pass


class PPMHeaderError(PPMError):
    pass


class PPMMaxvalError(PPMError):
    pass


class PPMTruncatedError(PPMError):
    pass


class DegenerateBoxError(ValueError):
    """A box with zero width or height after clamping."""


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """``height x width x 3`` uint8 raster, row-major RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"pixels must have shape (height, width, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.integer) and (px.min() < 0 or px.max() > 255):
                raise ValueError("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        if px is self.pixels:
            px = px.copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def solid(cls, width: int, height: int, rgb=(0, 0, 0)) -> "ImageBuffer":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = np.asarray(rgb, dtype=np.uint8)
        return cls(px)

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"ImageBuffer({self.width}x{self.height})"


# P6 header: magic, whitespace, width, height, maxval, single whitespace byte.
_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_ppm(data: bytes) -> ImageBuffer:
    if data[:2] != b"P6":
        raise PPMMagicError(f"not a binary PPM (magic {data[:2]!r})")
    m = _HEADER.match(data)
    if m is None:
        raise PPMHeaderError("malformed PPM header")
    width, height, maxval = (int(g) for g in m.groups())
    if width < 1 or height < 1:
        raise PPMHeaderError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PPMMaxvalError(f"maxval must be 255, got {maxval}")
    body = data[m.end():]
    need = width * height * 3
    if len(body) < need:
        raise PPMTruncatedError(f"expected {need} pixel bytes, got {len(body)}")
    if len(body) > need:
        raise PPMHeaderError(f"{len(body) - need} trailing bytes after pixel data")
    px = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(px.copy())


def write_ppm(img: ImageBuffer) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.to_bytes()


def load_ppm(path: str | Path) -> ImageBuffer:
    return read_ppm(Path(path).read_bytes())


def save_ppm(img: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(write_ppm(img))


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round to nearest, ties away from zero for the non-negative range used here."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(x), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class DriftSpec:
    """One drift transform and its parameters.

    Only the field belonging to ``kind`` is meaningful; ``seed`` is always
    carried even for deterministic transforms.
    """

    kind: str
    sigma: float = 0.0
    gain: float = 1.0
    angle: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}; expected one of {DRIFT_KINDS}")
        if self.kind == "gaussian_noise" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kind == "brightness" and not self.gain > 0:
            raise ValueError("gain must be > 0")
        if self.kind == "tilt" and not -180.0 <= self.angle <= 180.0:
            raise ValueError("angle must lie in [-180, 180]")
        if not 0 <= self.seed <= rng.MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def param_name(self) -> str:
        return {"gaussian_noise": "sigma", "brightness": "gain", "tilt": "angle"}[self.kind]

    @property
    def param(self) -> float:
        return getattr(self, self.param_name)

    def to_dict(self) -> dict:
        return {"kind": self.kind, self.param_name: self.param, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DriftSpec":
        allowed = {"kind", "sigma", "gain", "angle", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown drift fields {sorted(unknown)}")
        if "kind" not in d:
            raise ValueError("drift spec needs a kind")
        kw = {k: float(v) for k, v in d.items() if k in ("sigma", "gain", "angle")}
        return cls(kind=d["kind"], seed=int(d.get("seed", 0)), **kw)

    @classmethod
    def parse(cls, text: str, default_seed: int = 0) -> "DriftSpec":
        """Parse ``kind=gaussian_noise,sigma=10[,seed=3]``."""
        fields: dict[str, str] = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            key, sep, value = part.partition("=")
            if not sep:
                raise ValueError(f"expected key=value, got {part!r}")
            fields[key.strip()] = value.strip()
        fields.setdefault("seed", str(default_seed))
        return cls.from_dict(fields)

    def tag(self) -> str:
        """Filename-safe label such as ``gaussian_noise_sigma10``."""
        value = f"{self.param:g}".replace("-", "m").replace(".", "p")
        return f"{self.kind}_{self.param_name}{value}"


def add_gaussian_noise(img: ImageBuffer, sigma: float, seed: int) -> ImageBuffer:
    """Add ``N(0, sigma)`` per channel, drawn row-major in R, G, B order."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    noise = rng.normals(seed, img.pixels.size).reshape(img.pixels.shape)
    return ImageBuffer(_to_u8(img.pixels + sigma * noise))


def adjust_brightness(img: ImageBuffer, gain: float) -> ImageBuffer:
    """Multiplicative daylight change."""
    if not gain > 0:
        raise ValueError("gain must be > 0")
    return ImageBuffer(_to_u8(img.pixels * float(gain)))


def _cos_sin(angle: float) -> tuple[float, float]:
    # exact values at multiples of 90 keep those rotations pure permutations
    if float(angle) % 90.0 == 0.0:
        quarter = int(round(angle / 90.0)) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][quarter]
    rad = math.radians(angle)
    return math.cos(rad), math.sin(rad)


def bilinear_sample(px: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``px`` at fractional pixel indices; taps outside the image are black."""
    h, w = px.shape[:2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = px.astype(np.float64)
    out = np.zeros(sx.shape + (3,), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            tap = np.zeros_like(out)
            tap[inside] = src[yi[inside], xi[inside]]
            out += wx * wy * tap
    return out


def tilt(img: ImageBuffer, angle: float) -> ImageBuffer:
    """Rotate counter-clockwise (as displayed) about the image centre.

    Output keeps the input size; regions uncovered by the rotated source are
    black.
    """
    if not -180.0 <= angle <= 180.0:
        raise ValueError("angle must lie in [-180, 180]")
    if angle == 0:
        return ImageBuffer(img.pixels)
    c, s = _cos_sin(angle)
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    sx = cx + dx * c - dy * s
    sy = cy + dx * s + dy * c
    return ImageBuffer(_to_u8(bilinear_sample(img.pixels, sx, sy)))


def rotate_point(x: float, y: float, angle: float, width: int, height: int) -> tuple[float, float]:
    """Where continuous image point ``(x, y)`` lands under :func:`tilt`."""
    c, s = _cos_sin(angle)
    cx, cy = width / 2.0, height / 2.0
    dx, dy = x - cx, y - cy
    return cx + dx * c + dy * s, cy - dx * s + dy * c


def transform_bbox(box, angle: float, width: int, height: int):
    """Axis-aligned hull of ``box``'s rotated corners, clamped to the image.

    ``box`` is any object with ``x1, y1, x2, y2``; a box of the same type is
    returned (coordinates may be fractional).
    """
    corners = [(box.x1, box.y1), (box.x2, box.y1), (box.x1, box.y2), (box.x2, box.y2)]
    pts = [rotate_point(x, y, angle, width, height) for x, y in corners]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x1 = min(max(min(xs), 0.0), width)
    x2 = min(max(max(xs), 0.0), width)
    y1 = min(max(min(ys), 0.0), height)
    y2 = min(max(max(ys), 0.0), height)
    if not (x1 < x2 and y1 < y2):
        raise DegenerateBoxError(f"box degenerate after tilt by {angle} and clamping")
    return type(box)(x1, y1, x2, y2)


def apply_drift(img: ImageBuffer, spec: DriftSpec) -> ImageBuffer:
    if spec.kind == "gaussian_noise":
        return add_gaussian_noise(img, spec.sigma, spec.seed)
    if spec.kind == "brightness":
        return adjust_brightness(img, spec.gain)
    return tilt(img, spec.angle)
