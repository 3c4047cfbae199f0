"""Pure image degradation transforms.

Images are ``numpy.uint8`` arrays shaped ``(H, W)`` or ``(H, W, C)``; every
channel is processed independently. Nothing here touches global state, so the
functions are safe to call from any number of worker threads.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ImageError, ProfileError, ProfileTooAggressiveError

__all__ = [
    "AugProfile",
    "Kernel2D",
    "TABLE_PROFILES",
    "DEFAULT_KERNEL_SIZE",
    "parse_profile",
    "format_profile",
    "canonical_profile",
    "bilinear_resize",
    "gaussian_density",
    "gaussian_kernel",
    "gaussian_blur",
    "step_schedule",
    "step_resize",
    "apply_profile",
    "read_image",
    "write_png",
    "encode_png",
]

# Row labels of the benchmark table, in presentation order.
TABLE_PROFILES = (
    "normal",
    "R0.5S50",
    "R0.5S1",
    "R0.2S50",
    "R0.2S1",
    "R0.1S50",
    "R0.1S1",
    "R1S1_GF500",
    "R0.5S1_GF500",
    "R0.05S50",
)

DEFAULT_KERNEL_SIZE = 11

_PROFILE_RE = re.compile(
    r"^R(?P<ratio>\d+(?:\.\d+)?)S(?P<step>\d+)(?:_GF(?P<sigma>\d+(?:\.\d+)?))?$"
)


@dataclass(frozen=True)
class AugProfile:
    """One degradation recipe: scale ``ratio``, resize ``step`` count, blur ``sigma``."""

    ratio: float = 1.0
    step: int = 1
    sigma: float | None = None

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ProfileError(f"ratio must be in (0, 1], got {self.ratio}", field="ratio")
        if self.step < 1:
            raise ProfileError(f"step must be >= 1, got {self.step}", field="step")
        if self.sigma is not None and not self.sigma > 0:
            raise ProfileError(f"sigma must be > 0, got {self.sigma}", field="sigma")

    @property
    def name(self) -> str:
        return format_profile(self)

    @property
    def is_identity(self) -> bool:
        return self.ratio == 1.0 and self.step == 1 and self.sigma is None

    def __str__(self):
        return self.name


def _fmt_decimal(x: float) -> str:
    return np.format_float_positional(x, trim="-")


def parse_profile(name: str | AugProfile) -> AugProfile:
    """Parse ``R<ratio>S<step>[_GF<sigma>]`` or the literal ``normal``."""
    if isinstance(name, AugProfile):
        return name
    if not isinstance(name, str):
        raise ProfileError(f"profile name must be a string, got {type(name).__name__}")
    if name == "normal":
        return AugProfile()
    m = _PROFILE_RE.match(name)
    if m is None:
        raise ProfileError(
            f"malformed profile {name!r}: expected R<decimal>S<integer>[_GF<decimal>]",
            field="name",
        )
    ratio = float(m["ratio"])
    step = int(m["step"])
    sigma = float(m["sigma"]) if m["sigma"] is not None else None
    if not (0.0 < ratio <= 1.0):
        raise ProfileError(f"profile {name!r}: ratio {m['ratio']} not in (0, 1]", field="ratio")
    if step < 1:
        raise ProfileError(f"profile {name!r}: step {step} < 1", field="step")
    if sigma is not None and sigma <= 0:
        raise ProfileError(f"profile {name!r}: sigma {m['sigma']} <= 0", field="sigma")
    return AugProfile(ratio, step, sigma)


def format_profile(profile: AugProfile) -> str:
    if profile.is_identity:
        return "normal"
    out = f"R{_fmt_decimal(profile.ratio)}S{profile.step}"
    if profile.sigma is not None:
        out += f"_GF{_fmt_decimal(profile.sigma)}"
    return out


def canonical_profile(name: str | AugProfile) -> str:
    return format_profile(parse_profile(name))


def _check_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.dtype != np.uint8:
        raise ImageError(f"image must be uint8, got {a.dtype}")
    if a.ndim not in (2, 3):
        raise ImageError(f"image must be HxW or HxWxC, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ImageError(f"image dimensions must be >= 1, got {a.shape[:2]}")
    return a


def _round_to_u8(v: np.ndarray) -> np.ndarray:
    # nearest integer, ties away from zero; inputs are non-negative
    f = np.floor(v)
    r = f + (v - f >= 0.5)
    return np.clip(r, 0, 255).astype(np.uint8)


def _axis_coords(src_len: int, out_len: int):
    scale = src_len / out_len
    pos = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.minimum(np.maximum(pos, 0.0), float(src_len - 1))
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src_len - 1)
    return lo, hi, pos - lo


def bilinear_resize(src, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample to ``out_w`` x ``out_h`` with half-pixel centres.

    Source coordinates are clamped to the border, so edge pixels are
    replicated rather than blended with zeros.
    """
    a = _check_image(src)
    if int(out_w) < 1 or int(out_h) < 1:
        raise ImageError(f"target size must be >= 1x1, got {out_w}x{out_h}")
    out_w, out_h = int(out_w), int(out_h)
    h, w = a.shape[:2]
    if (w, h) == (out_w, out_h):
        return a.copy()

    x1, x2, alpha = _axis_coords(w, out_w)
    y1, y2, beta = _axis_coords(h, out_h)
    f = a.astype(np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    alpha = alpha[None, :, None]
    beta = beta[:, None, None]

    p11 = f[y1][:, x1]
    p21 = f[y1][:, x2]
    p12 = f[y2][:, x1]
    p22 = f[y2][:, x2]
    v = (
        (1 - alpha) * (1 - beta) * p11
        + alpha * (1 - beta) * p21
        + (1 - alpha) * beta * p12
        + alpha * beta * p22
    )
    out = _round_to_u8(v)
    return out[:, :, 0] if a.ndim == 2 else out


@dataclass(frozen=True)
class Kernel2D:
    sigma: float
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def gaussian_density(x, y, sigma: float):
    """Isotropic 2-D Gaussian density at offset ``(x, y)`` from the centre."""
    return 1.0 / (2.0 * math.pi * sigma**2) * np.exp(-(np.square(x) + np.square(y)) / (2.0 * sigma**2))


def gaussian_kernel(sigma: float, size: int = DEFAULT_KERNEL_SIZE) -> Kernel2D:
    if not sigma > 0:
        raise ImageError(f"sigma must be > 0, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ImageError(f"kernel size must be odd and >= 1, got {size}")
    r = size // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    g = gaussian_density(off[None, :], off[:, None], float(sigma))
    w = g / g.sum()
    w.setflags(write=False)
    return Kernel2D(float(sigma), w)


def gaussian_blur(src, sigma: float, size: int = DEFAULT_KERNEL_SIZE) -> np.ndarray:
    """Convolve with a normalised Gaussian kernel, replicating edge pixels."""
    a = _check_image(src)
    k = gaussian_kernel(sigma, size)
    r = k.size // 2
    f = a.astype(np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    h, w = f.shape[:2]
    p = np.pad(f, ((r, r), (r, r), (0, 0)), mode="edge")
    acc = np.zeros_like(f)
    for dy in range(k.size):
        for dx in range(k.size):
            acc += k.weights[dy, dx] * p[dy:dy + h, dx:dx + w]
    out = _round_to_u8(acc)
    return out[:, :, 0] if a.ndim == 2 else out


def _target_length(src_len: int, ratio: float) -> int:
    # exact decimal arithmetic: 500 * 0.05 must give 25, not 24.999...
    return math.floor(src_len * Fraction(repr(ratio)))


def step_schedule(src_w: int, src_h: int, profile: AugProfile) -> list[tuple[int, int]]:
    """Sizes ``(w, h)`` passed to each successive resize of the step loop."""
    tw = _target_length(src_w, profile.ratio)
    th = _target_length(src_h, profile.ratio)
    if tw < 1 or th < 1:
        raise ProfileTooAggressiveError(
            f"profile {profile.name} shrinks {src_w}x{src_h} to {tw}x{th}, below 1 pixel"
        )
    wr = (tw / src_w) ** (1.0 / profile.step)
    hr = (th / src_h) ** (1.0 / profile.step)
    cw, ch = src_w, src_h
    sizes = []
    for i in range(profile.step):
        if i == profile.step - 1:
            nw, nh = tw, th
        else:
            nw = max(math.floor(cw * wr), tw)
            nh = max(math.floor(ch * hr), th)
        sizes.append((nw, nh))
        cw, ch = nw, nh
        if (nw, nh) == (tw, th):
            break
    return sizes


def step_resize(src, profile: AugProfile | str) -> np.ndarray:
    """Optionally blur once, then shrink in ``profile.step`` bilinear stages."""
    a = _check_image(src)
    profile = parse_profile(profile)
    sizes = step_schedule(a.shape[1], a.shape[0], profile)
    img = gaussian_blur(a, profile.sigma) if profile.sigma is not None else a
    for w, h in sizes:
        img = bilinear_resize(img, w, h)
    return img


def apply_profile(src, profile: AugProfile | str) -> np.ndarray:
    a = _check_image(src)
    profile = parse_profile(profile)
    if profile.is_identity:
        return a.copy()
    return step_resize(a, profile)


def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file to an ``(H, W, 3)`` uint8 array."""
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc


def encode_png(img) -> bytes:
    a = _check_image(img)
    buf = io.BytesIO()
    PILImage.fromarray(a).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(img, path) -> None:
    Path(path).write_bytes(encode_png(img))
