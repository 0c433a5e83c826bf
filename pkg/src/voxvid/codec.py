"""Latent codecs standing in for the frozen VAE, plus video tensor/PNG I/O.

The space-to-depth codec keeps the 8x downsampling geometry losslessly
(8x8x3 pixel blocks become 192 channels); the identity codec passes
synthetic latents through unchanged so backbone experiments can use the
4-channel latent shapes directly.

Tensor files (``.vtf``) are raw little-endian arrays with a fixed 16-byte
header (magic ``VTF0``, dtype code, rank, reserved) followed by the
extents as u64 and the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import ShapeError

__all__ = [
    "LatentCodec",
    "SpaceToDepthCodec",
    "IdentityCodec",
    "make_codec",
    "save_tensor",
    "load_tensor",
    "export_png_frames",
    "import_png_frames",
]

MAGIC = b"VTF0"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_IDS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class SpaceToDepthCodec:
    """Lossless pixel<->latent map: factor-8 blocks rearranged into channels."""

    kind = "space_to_depth"
    factor = 8

    def encode(self, video: np.ndarray) -> np.ndarray:
        """(F, 8H, 8W, 3) -> (F, H, W, 192); block interior flattens as
        (row, col, channel)."""
        video = np.asarray(video)
        if video.ndim != 4 or video.shape[-1] != 3:
            raise ShapeError(f"expected (F, H, W, 3) pixels, got {video.shape}")
        f, h, w, c = video.shape
        s = self.factor
        if h % s or w % s:
            raise ShapeError(f"pixel extents ({h}, {w}) not divisible by {s}")
        x = video.reshape(f, h // s, s, w // s, s, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(f, h // s, w // s, s * s * c))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent)
        s = self.factor
        if latent.ndim != 4 or latent.shape[-1] != s * s * 3:
            raise ShapeError(
                f"expected (F, h, w, {s * s * 3}) latent, got {latent.shape}"
            )
        f, h, w, _ = latent.shape
        x = latent.reshape(f, h, w, s, s, 3)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x.reshape(f, h * s, w * s, 3))

    @property
    def channels(self) -> int:
        return self.factor * self.factor * 3


class IdentityCodec:
    """Pass-through for synthetic latents, with shape validation."""

    kind = "identity"
    factor = 1

    def __init__(self, expected_shape: tuple[int, int, int] | None = None):
        # (H, W, C) per frame, when the run config pins it.
        self.expected_shape = tuple(expected_shape) if expected_shape else None

    def _validate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4:
            raise ShapeError(f"expected (F, H, W, C), got {x.shape}")
        if self.expected_shape and tuple(x.shape[1:]) != self.expected_shape:
            raise ShapeError(
                f"latent frame shape {x.shape[1:]} != configured {self.expected_shape}"
            )
        return x

    def encode(self, video: np.ndarray) -> np.ndarray:
        return self._validate(video)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self._validate(latent)


LatentCodec = SpaceToDepthCodec | IdentityCodec


def make_codec(kind: str, expected_shape=None) -> LatentCodec:
    if kind == "space_to_depth":
        return SpaceToDepthCodec()
    if kind == "identity":
        return IdentityCodec(expected_shape)
    raise ValueError(f"unknown codec kind: {kind}")


# -- tensor file I/O -------------------------------------------------------------


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_IDS:
        arr = arr.astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", _DTYPE_IDS[arr.dtype], arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != MAGIC:
            raise ValueError(f"{path}: not a tensor file (bad magic)")
        dtype_code, rank, _ = struct.unpack("<III", head[4:])
        if dtype_code not in _DTYPE_CODES:
            raise ValueError(f"{path}: unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        dtype = _DTYPE_CODES[dtype_code]
        data = np.frombuffer(fh.read(), dtype=dtype)
    expected = int(np.prod(shape)) if rank else 1
    if data.size != expected:
        raise ValueError(f"{path}: payload size {data.size} != shape {shape}")
    return data.reshape(shape).copy()


# -- PNG frame sequences ------------------------------------------------------------


def export_png_frames(video: np.ndarray, out_dir, prefix: str = "frame") -> list[Path]:
    """Write (F, H, W, 3) pixels in [-1, 1] as 8-bit PNGs for inspection."""
    from PIL import Image

    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ShapeError(f"expected (F, H, W, 3), got {video.shape}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    scaled = np.clip(np.rint((video + 1.0) * 127.5), 0, 255).astype(np.uint8)
    for i, frame in enumerate(scaled):
        p = out_dir / f"{prefix}_{i:05d}.png"
        Image.fromarray(frame).save(p)
        paths.append(p)
    return paths


def import_png_frames(paths) -> np.ndarray:
    """Read PNGs back into (F, H, W, 3) floats in [-1, 1]."""
    from PIL import Image

    frames = []
    for p in paths:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64)
        frames.append(img / 127.5 - 1.0)
    return np.stack(frames)
