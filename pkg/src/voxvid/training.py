"""Optimization loop machinery: AdamW, gradient clipping, EMA shadow
weights, clip segmentation with flip augmentation, and checkpointing."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .diffusion import DiffusionSchedule, loss_simple, loss_vlb, q_sample
from .tensor import Tensor, NonFiniteError, backward


def _get_axpy(dtype):
    """In-place BLAS y += a*x for contiguous arrays; avoids a scaled temporary."""
    from scipy.linalg.blas import get_blas_funcs

    return get_blas_funcs("axpy", dtype=dtype)

__all__ = [
    "AdamW",
    "Ema",
    "clip_grad_norm",
    "make_clips",
    "train_step",
    "save_checkpoint",
    "load_checkpoint",
    "config_fingerprint",
]

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STDF"
CKPT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_IDS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Defaults follow the training recipe: lr 1e-4, betas (0.9, 0.999), no
    weight decay. Parameter updates happen in place on ``param.data``; the
    optimizer owns the parameters for the duration of training.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        # Moments live in one flat buffer each; the per-name dicts are views
        # into those buffers so checkpointing stays name-addressed while the
        # update runs as a handful of full-width vector ops.
        sizes = [(k, p.data.size, p.data.shape) for k, p in params.items()]
        total = sum(s for _, s, _ in sizes)
        dtype = np.result_type(*(p.data.dtype for p in params.values()))
        self._flat_m = np.zeros(total, dtype=dtype)
        self._flat_v = np.zeros(total, dtype=dtype)
        self._flat_g = np.empty(total, dtype=dtype)
        self._scratch = np.empty(total, dtype=dtype)
        self._offsets = {}
        self.m = {}
        self.v = {}
        off = 0
        for k, size, shape in sizes:
            self._offsets[k] = (off, size)
            self.m[k] = self._flat_m[off : off + size].reshape(shape)
            self.v[k] = self._flat_v[off : off + size].reshape(shape)
            off += size

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if set(grads) == set(self.params):
            self._step_flat(grads)
            return
        for name, g in grads.items():
            if not np.isfinite(g.sum()):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            tmp = g * g
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            np.divide(v, bc2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            update = m / bc1
            update /= tmp
            if self.weight_decay:
                update += self.weight_decay * p.data
            update *= self.lr
            p.data -= update.astype(p.data.dtype, copy=False)

    def _step_flat(self, grads: dict[str, np.ndarray]) -> None:
        g = self._flat_g
        for name, (off, size) in self._offsets.items():
            g[off : off + size] = grads[name].reshape(-1)
        if not np.isfinite(g.sum()):
            for name, garr in grads.items():
                if not np.isfinite(garr.sum()):
                    raise NonFiniteError(
                        f"non-finite gradient for parameter '{name}'"
                    )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        m, v, tmp = self._flat_m, self._flat_v, self._scratch
        axpy = _get_axpy(m.dtype)
        m *= self.beta1
        axpy(g, m, a=1.0 - self.beta1)
        np.multiply(g, g, out=g)
        v *= self.beta2
        axpy(g, v, a=1.0 - self.beta2)
        # (m/bc1) / (sqrt(v/bc2)+eps) == m * (sqrt(bc2)/bc1) / (sqrt(v)+eps*sqrt(bc2))
        np.sqrt(v, out=g)
        g += self.eps * np.sqrt(bc2)
        np.divide(m, g, out=tmp)
        tmp *= self.lr * np.sqrt(bc2) / bc1
        lr_wd = self.lr * self.weight_decay
        for name, (off, size) in self._offsets.items():
            p = self.params[name]
            seg = tmp[off : off + size].reshape(p.data.shape)
            if lr_wd:
                p.data -= seg + lr_wd * p.data
            else:
                p.data -= seg

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"])
        for k in self.params:
            self.m[k][...] = arrays[f"m/{k}"]
            self.v[k][...] = arrays[f"v/{k}"]


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float = 1.0
) -> tuple[dict[str, np.ndarray], float]:
    """Global L2-norm clipping; returns (scaled grads, pre-clip norm)."""
    flat = np.concatenate([g.reshape(-1) for g in grads.values()])
    norm = float(np.sqrt(np.dot(flat, flat)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


class Ema:
    """Exponential moving average shadow of every parameter."""

    def __init__(self, params: dict[str, Tensor], decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = self.decay
        for k, p in params.items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self, params: dict[str, Tensor]) -> None:
        for k, p in params.items():
            p.data[...] = self.shadow[k].astype(p.data.dtype)


@dataclass
class ClipSample:
    clip: np.ndarray           # (F, H, W, C) latent frames
    audio: np.ndarray | None   # (F, m) windowed features, aligned to the clip
    reference: np.ndarray      # (H, W, C) reference frame latent
    motion: np.ndarray | None  # (N, H, W, C) frames preceding the clip
    video_index: int
    start: int


def make_clips(
    dataset,
    clip_len: int = 16,
    sampling_interval: int = 1,
    flip_prob: float = 0.5,
    rng: np.random.Generator | None = None,
    motion_frames: int = 0,
) -> Iterator[ClipSample]:
    """Yield aligned (clip, audio window, reference frame) samples forever.

    ``dataset`` is a sequence of items with ``latents`` (F_total, H, W, C)
    and optional ``audio_windowed`` (F_total, m). The reference frame is a
    random frame of the same video outside the clip; horizontal flips apply
    jointly to clip and reference. Videos shorter than the clip span are
    skipped with a log line.
    """
    rng = rng or np.random.default_rng(0)
    span = clip_len * sampling_interval
    usable = []
    for i, item in enumerate(dataset):
        if item.latents.shape[0] < span:
            log.warning(
                "skipping video %d: %d frames < clip span %d",
                i, item.latents.shape[0], span,
            )
            continue
        usable.append((i, item))
    if not usable:
        raise ValueError("no video long enough for the requested clip span")
    while True:
        vi, item = usable[rng.integers(len(usable))]
        total = item.latents.shape[0]
        lo = motion_frames * sampling_interval
        hi = total - span
        start = int(rng.integers(lo, hi + 1)) if hi > lo else lo
        idx = start + np.arange(clip_len) * sampling_interval
        clip = item.latents[idx].copy()
        audio = None
        if getattr(item, "audio_windowed", None) is not None:
            audio = item.audio_windowed[idx].copy()
        outside = np.setdiff1d(np.arange(total), idx)
        ref_pool = outside if outside.size else np.arange(total)
        reference = item.latents[int(rng.choice(ref_pool))].copy()
        motion = None
        if motion_frames > 0:
            midx = start - sampling_interval * np.arange(motion_frames, 0, -1)
            motion = item.latents[midx].copy()
        if rng.random() < flip_prob:
            clip = clip[:, :, ::-1, :].copy()
            reference = reference[:, ::-1, :].copy()
            if motion is not None:
                motion = motion[:, :, ::-1, :].copy()
        yield ClipSample(clip, audio, reference, motion, vi, start)


def train_step(
    model,
    batch: dict[str, np.ndarray],
    sched: DiffusionSchedule,
    optim: AdamW,
    ema: Ema | None,
    rng: np.random.Generator,
    lambda_vlb: float = 1.0,
    clip_norm: float | None = 1.0,
    zero_audio_prob: float = 0.1,
) -> dict[str, float]:
    """One optimization step; returns detached loss values and grad norm.

    batch keys: ``latents`` (B, F, H, W, C), ``portrait`` (B, H, W, C),
    optional ``audio_windowed`` (B, F, m), optional ``motion`` (B, N, H, W, C).
    """
    x0 = np.asarray(batch["latents"])
    b = x0.shape[0]
    dtype = model.dtype
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape).astype(dtype)
    x0_t = Tensor(x0.astype(dtype))
    eps_t = Tensor(eps)
    xt = q_sample(x0_t, t, eps_t, sched)

    audio_tokens = None
    if batch.get("audio_windowed") is not None:
        windowed = Tensor(np.asarray(batch["audio_windowed"], dtype=dtype))
        audio_tokens = model.audio_proj.forward(windowed)
        if zero_audio_prob > 0.0:
            keep = (rng.random(b) >= zero_audio_prob).astype(dtype)
            audio_tokens = audio_tokens * Tensor(keep.reshape(b, 1, 1, 1))

    out = model.forward(
        xt,
        t,
        portrait=batch.get("portrait"),
        audio_tokens=audio_tokens,
        motion_latents=batch.get("motion"),
    )
    l_simple = loss_simple(out, eps_t)
    if lambda_vlb > 0.0:
        l_vlb = loss_vlb(out, x0_t, xt, t, sched)
        total = l_simple + l_vlb * lambda_vlb
        vlb_val = float(l_vlb.data)
    else:
        total = l_simple
        vlb_val = 0.0

    grad_map = backward(total)
    grads = {
        name: grad_map[p.node_id].data
        for name, p in model.params.items()
        if p.node_id in grad_map
    }
    if clip_norm is not None and clip_norm > 0:
        grads, norm = clip_grad_norm(grads, clip_norm)
    else:
        norm = float("nan")
    optim.step(grads)
    if ema is not None:
        ema.update(model.params)
    return {
        "loss_simple": float(l_simple.data),
        "loss_vlb": vlb_val,
        "loss_total": float(total.data),
        "grad_norm": norm,
    }


# -- checkpoints ---------------------------------------------------------------


def config_fingerprint(config_dict: dict) -> bytes:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_IDS:
        arr = arr.astype(np.float64)
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BI", _DTYPE_IDS[arr.dtype], arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(
    path,
    fingerprint: bytes,
    model_params: dict[str, Tensor],
    ema: Ema | None = None,
    optim: AdamW | None = None,
    step: int = 0,
) -> None:
    """Named-tensor archive: STDF header + (name, dtype, shape, payload) records."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(fingerprint)
        _write_record(fh, "meta/step", np.array(float(step)))
        for k, p in model_params.items():
            _write_record(fh, f"model/{k}", p.data)
        if ema is not None:
            _write_record(fh, "ema/decay", np.array(ema.decay))
            for k, s in ema.shadow.items():
                _write_record(fh, f"ema/{k}", s)
        if optim is not None:
            for k, arr in optim.state_arrays().items():
                _write_record(fh, f"optim/{k}", arr)


def load_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Returns (config fingerprint, flat name -> array map)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        fingerprint = fh.read(32)
        arrays: dict[str, np.ndarray] = {}
        while True:
            lenb = fh.read(4)
            if not lenb:
                break
            (nlen,) = struct.unpack("<I", lenb)
            name = fh.read(nlen).decode()
            dtype_code, rank = struct.unpack("<BI", fh.read(5))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            dtype = _DTYPE_CODES[dtype_code]
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).copy()
    return fingerprint, arrays
