"""Dataset readers, writers and seeded synthetic generators.

Every dataset that enters the pipeline is an (N, 3, 32, 32) uint8 array.
Grayscale sources are replicated to three channels and other sizes are
bilinearly resized.

IMGB layout (little-endian)::

    b"IMGB" | u32 version | u32 N | u32 C | u32 H | u32 W | payload

Version 1 carries N*C*H*W uint8 values; version 2 carries float32 values
and is used for float maps such as likelihood heatmaps.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, DimensionError, TruncatedError, VersionError
from .seeding import make_rng

IMAGE_SIZE = 32
IDX_UBYTE_3D = 0x00000803
IMGB_MAGIC = b"IMGB"
IMGB_U8 = 1
IMGB_F32 = 2
_IMGB_HEADER = struct.Struct("<4s5I")
_MAX_ELEMENTS = 2**32


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, 32, 32) uint8
    name: str = ""
    provenance: str = ""

    def __len__(self):
        return len(self.images)

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"dataset images must be uint8 N x 3 x 32 x 32, got {self.images.dtype} {self.images.shape}")


# ---------------------------------------------------------------------------
# pixel plumbing


def gray_to_rgb(x: np.ndarray) -> np.ndarray:
    """Replicate a single channel three times; accepts (1, H, W) or (N, 1, H, W)."""
    axis = x.ndim - 3
    if x.ndim not in (3, 4) or x.shape[axis] != 1:
        raise ValueError(f"expected a single-channel image, got shape {x.shape}")
    return np.repeat(x, 3, axis=axis)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-centre bilinear sampling.

    Output pixel (i, j) samples source coordinate
    ``((i + 0.5) * H / out_h - 0.5, (j + 0.5) * W / out_w - 0.5)``, clamped to
    the image, and blends its four neighbours.  uint8 inputs are rounded
    half-up and clipped back to uint8.
    """
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()

    def axis_weights(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis_weights(h, out_h)
    x0, x1, wx = axis_weights(w, out_w)
    xf = x.astype(np.float64)
    top = xf[..., y0, :] * (1 - wy)[:, None] + xf[..., y1, :] * wy[:, None]
    out = top[..., x0] * (1 - wx) + top[..., x1] * wx
    if x.dtype == np.uint8:
        return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out.astype(x.dtype)


def standardize(images: np.ndarray) -> np.ndarray:
    """Bring an (N, C, H, W) uint8 array to (N, 3, 32, 32)."""
    if images.ndim != 4:
        raise ValueError(f"expected N x C x H x W, got shape {images.shape}")
    if images.shape[1] == 1:
        images = gray_to_rgb(images)
    elif images.shape[1] != 3:
        raise ValueError(f"cannot convert {images.shape[1]}-channel images to RGB")
    return bilinear_resize(images, IMAGE_SIZE, IMAGE_SIZE)


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx_images(data: bytes) -> np.ndarray:
    """Raw (N, H, W) uint8 array from an IDX3 unsigned-byte file."""
    if len(data) < 4:
        raise TruncatedError("IDX file shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != IDX_UBYTE_3D:
        raise BadMagicError(f"IDX magic is 0x{magic:08x}, expected 0x{IDX_UBYTE_3D:08x}")
    if len(data) < 16:
        raise TruncatedError("IDX header truncated")
    n, h, w = struct.unpack(">3I", data[4:16])
    if h == 0 or w == 0 or n * h * w >= _MAX_ELEMENTS:
        raise DimensionError(f"implausible IDX dimensions {n} x {h} x {w}")
    need = n * h * w
    have = len(data) - 16
    if have < need:
        raise TruncatedError(f"IDX payload has {have} bytes, header promises {need}")
    if have > need:
        raise DimensionError(f"IDX payload has {have - need} trailing bytes beyond {n} x {h} x {w}")
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, h, w).copy()


def load_idx(images_path, name: str | None = None) -> ImageDataset:
    raw = parse_idx_images(_read_bytes(images_path))
    images = standardize(raw[:, None])
    return ImageDataset(images, name or Path(images_path).stem, f"idx:{images_path}")


# ---------------------------------------------------------------------------
# IMGB


def encode_imgb(array: np.ndarray) -> bytes:
    if array.ndim != 4:
        raise ValueError(f"IMGB stores N x C x H x W arrays, got shape {array.shape}")
    if array.dtype == np.uint8:
        version, payload = IMGB_U8, array.tobytes()
    elif array.dtype in (np.float32, np.float64):
        version, payload = IMGB_F32, np.ascontiguousarray(array, dtype="<f4").tobytes()
    else:
        raise ValueError(f"IMGB cannot store dtype {array.dtype}")
    return _IMGB_HEADER.pack(IMGB_MAGIC, version, *array.shape) + payload


def decode_imgb(data: bytes, version: int = IMGB_U8) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedError("IMGB file shorter than its magic")
    if data[:4] != IMGB_MAGIC:
        raise BadMagicError(f"IMGB magic is {data[:4]!r}, expected {IMGB_MAGIC!r}")
    if len(data) < _IMGB_HEADER.size:
        raise TruncatedError("IMGB header truncated")
    _, ver, n, c, h, w = _IMGB_HEADER.unpack_from(data)
    if ver != version:
        raise VersionError(f"IMGB version {ver}, expected {version}")
    count = n * c * h * w
    if count >= _MAX_ELEMENTS:
        raise DimensionError(f"implausible IMGB dimensions {n} x {c} x {h} x {w}")
    itemsize = 1 if version == IMGB_U8 else 4
    have = len(data) - _IMGB_HEADER.size
    if have < count * itemsize:
        raise TruncatedError(f"IMGB payload has {have} bytes, header promises {count * itemsize}")
    if have > count * itemsize:
        raise DimensionError(f"IMGB payload has {have - count * itemsize} trailing bytes")
    dtype = np.uint8 if version == IMGB_U8 else np.dtype("<f4")
    arr = np.frombuffer(data, dtype=dtype, offset=_IMGB_HEADER.size).reshape(n, c, h, w)
    return arr.astype(np.float32) if version == IMGB_F32 else arr.copy()


def write_imgb(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_imgb(array))


def read_imgb(path) -> np.ndarray:
    """Raw uint8 array of a version-1 IMGB file."""
    return decode_imgb(Path(path).read_bytes(), IMGB_U8)


def read_float_map(path) -> np.ndarray:
    """float32 array of a version-2 IMGB file."""
    return decode_imgb(Path(path).read_bytes(), IMGB_F32)


def save_imgb(path, dataset: ImageDataset | np.ndarray) -> None:
    write_imgb(path, getattr(dataset, "images", dataset))


def load_imgb(path, name: str | None = None) -> ImageDataset:
    raw = read_imgb(path)
    if len(raw) == 0:
        images = np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    else:
        images = standardize(raw)
    return ImageDataset(images, name or Path(path).stem, f"imgb:{path}")


# ---------------------------------------------------------------------------
# synthetic generators


def _ramp(rng, h=IMAGE_SIZE, w=IMAGE_SIZE) -> np.ndarray:
    """Linear ramp in [0, 1] along a random direction."""
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    span = t.max() - t.min()
    return (t - t.min()) / span


def _gradient(rng) -> np.ndarray:
    c0 = rng.uniform(0, 255, size=3)
    c1 = rng.uniform(0, 255, size=3)
    t = _ramp(rng)
    return c0[:, None, None] + (c1 - c0)[:, None, None] * t


def _gentle_gradient(rng) -> np.ndarray:
    """Per channel, a linear ramp confined to one 8-level histogram bin."""
    t = _ramp(rng)
    out = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    for c in range(3):
        span = rng.integers(2, 8)  # 2..7 levels
        lo = 8 * rng.integers(0, 32) + rng.integers(0, 8 - span)
        out[c] = lo + np.floor(t * span + 0.5)
    return out


def _value_noise(rng, cells: int) -> np.ndarray:
    coarse = rng.uniform(0, 255, size=(3, cells, cells))
    return bilinear_resize(coarse, IMAGE_SIZE, IMAGE_SIZE)


def _shapes(rng) -> np.ndarray:
    img = np.broadcast_to(rng.uniform(0, 255, size=(3, 1, 1)), (3, IMAGE_SIZE, IMAGE_SIZE)).copy()
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    for _ in range(rng.integers(3, 9)):
        color = rng.uniform(0, 255, size=3)
        cy, cx = rng.uniform(0, IMAGE_SIZE, size=2)
        ry, rx = rng.uniform(2, 12, size=2)
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        img[:, region] = color[:, None]
    return img


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def _complex_image(rng) -> np.ndarray:
    family = rng.integers(0, 4)
    if family == 0:
        img = _gradient(rng)
    elif family == 1:
        img = _shapes(rng)
    elif family == 2:
        img = _value_noise(rng, int(rng.choice([4, 6, 8])))
    else:
        alpha = rng.uniform(0.3, 0.7)
        img = alpha * _gradient(rng) + (1 - alpha) * _value_noise(rng, int(rng.choice([4, 8])))
        img += rng.normal(0, 4, size=img.shape)
    return _to_u8(img)


def _low_h_image(rng) -> np.ndarray:
    return _to_u8(_gentle_gradient(rng))


def _center_slice():
    lo = IMAGE_SIZE // 4
    return slice(lo, lo + IMAGE_SIZE // 2)


def _mid_h_image(rng) -> np.ndarray:
    img = _gentle_gradient(rng)
    c = _center_slice()
    rh, rw = rng.integers(4, 17, size=2)
    # top-left chosen so the rectangle overlaps the centre region
    top = rng.integers(c.start - rh + 1, c.stop)
    left = rng.integers(c.start - rw + 1, c.stop)
    top, left = max(top, 0), max(left, 0)
    img[:, top:top + rh, left:left + rw] = rng.uniform(0, 255, size=3)[:, None, None]
    return _to_u8(img)


def _high_h_image(rng) -> np.ndarray:
    img = _gentle_gradient(rng)
    c = _center_slice()
    img[:, c, c] = rng.integers(0, 256, size=(3, IMAGE_SIZE // 2, IMAGE_SIZE // 2))
    return _to_u8(img)


_FAMILIES = {
    "complex": _complex_image,
    "lowH": _low_h_image,
    "midH": _mid_h_image,
    "highH": _high_h_image,
}


def synth(family: str, n: int, seed: int) -> ImageDataset:
    """Generate ``n`` images of a synthetic family; image i uses stream (seed, family, i)."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown synthetic family {family!r}; choose from {sorted(_FAMILIES)}")
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = _FAMILIES[family]
    images = np.stack([gen(make_rng(seed, "synth", family, i)) for i in range(n)])
    return ImageDataset(images, f"synth_{family}", f"synth:{family}:{n}:{seed}")


def synth_complex(n: int, seed: int) -> ImageDataset:
    return synth("complex", n, seed)


def synth_low_h(n: int, seed: int) -> ImageDataset:
    return synth("lowH", n, seed)


def synth_mid_h(n: int, seed: int) -> ImageDataset:
    return synth("midH", n, seed)


def synth_high_h(n: int, seed: int) -> ImageDataset:
    return synth("highH", n, seed)


# ---------------------------------------------------------------------------
# dataset URIs


def load_dataset(uri: str) -> ImageDataset:
    """Resolve ``idx:<path>``, ``imgb:<path>`` or ``synth:<family>:<n>:<seed>``."""
    scheme, _, rest = uri.partition(":")
    if scheme == "idx":
        return load_idx(rest)
    if scheme == "imgb":
        return load_imgb(rest)
    if scheme == "synth":
        parts = rest.split(":")
        if len(parts) != 3:
            raise ValueError(f"synthetic URI must be synth:<family>:<n>:<seed>, got {uri!r}")
        family, n, seed = parts
        return synth(family, int(n), int(seed))
    raise ValueError(f"unknown dataset scheme in {uri!r}; use idx:, imgb: or synth:")
