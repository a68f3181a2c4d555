"""Image conventions and validation helpers.

Everything in this package speaks one dialect: images are float32 numpy
arrays of shape (H, W, 3) with values in [0, 1], masks are float32 arrays
of shape (H, W) with values in {0, 1}. On disk both are 8-bit PNG (RGB for
images, single channel for masks). The uint8 round-trip is exact on the
{k/255} grid, so identities established in uint8 space survive reloading.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image


def check_image(x: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) float image in [0, 1]; returns it as float32."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        raise ValueError(f"{name} must be floating point, got {x.dtype}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x.astype(np.float32, copy=False)


def check_mask(m: np.ndarray, name: str = "mask") -> np.ndarray:
    """Validate an (H, W) binary mask; returns it as float32 in {0, 1}."""
    m = np.asarray(m)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ValueError(f"{name} must have shape (H, W), got {m.shape}")
    vals = np.unique(m)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary, found values {vals[:8]}")
    return m.astype(np.float32, copy=False)


def same_shape(*arrays: np.ndarray) -> bool:
    shapes = {a.shape[:2] for a in arrays}
    return len(shapes) == 1


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(u: np.ndarray) -> np.ndarray:
    return (u.astype(np.float32) / 255.0)


def encode_png(x: np.ndarray) -> bytes:
    """Serialize an image or mask to PNG bytes (images RGB, masks 8-bit grey)."""
    u = to_uint8(x)
    mode = "RGB" if u.ndim == 3 else "L"
    buf = io.BytesIO()
    Image.fromarray(u, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    """Read PNG bytes back to float32; masks come back as (H, W) in {0, 1}."""
    img = Image.open(io.BytesIO(data))
    arr = np.asarray(img)
    if arr.ndim == 2:
        return from_uint8(arr)
    return from_uint8(arr[:, :, :3])


def save_png(path, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_png(x))


def load_png(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_png(f.read())


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
