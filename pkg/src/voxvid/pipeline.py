"""End-to-end runs: config parsing, training, sampling (including chained
long-duration generation), and the attention benchmark."""

from __future__ import annotations

import csv
import json
import logging
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import audio as audio_mod
from . import codec as codec_mod
from .backbone import Denoiser, ModelConfig, count_attention_elements
from .diffusion import ModelOutput, build_schedule, ddpm_sample
from .nn import attention, sinusoidal_embedding
from .tensor import Tensor, NonFiniteError, no_grad
from .training import (
    AdamW,
    Ema,
    config_fingerprint,
    load_checkpoint,
    make_clips,
    save_checkpoint,
    train_step,
)

__all__ = [
    "UserError",
    "InternalError",
    "RunConfig",
    "load_config",
    "run_train",
    "run_sample",
    "run_benchmark",
    "SyntheticDataset",
]

log = logging.getLogger(__name__)


class UserError(Exception):
    """Bad input from the caller (exit code 1)."""


class InternalError(Exception):
    """Invariant violation inside the toolkit (exit code 2)."""


def _take(section: dict, allowed: dict, where: str) -> dict:
    """Merge user keys over defaults; unknown keys are errors."""
    unknown = set(section) - set(allowed)
    if unknown:
        raise UserError(f"unknown config keys in '{where}': {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(section)
    return merged


@dataclass
class RunConfig:
    model: ModelConfig
    schedule_steps: int
    beta_min: float
    beta_max: float
    lr: float
    betas: tuple[float, float]
    weight_decay: float
    clip_norm: float
    ema_decay: float
    total_steps: int
    batch_size: int
    log_every: int
    ckpt_every: int
    lambda_vlb: float
    zero_audio_prob: float
    flip_prob: float
    sampling_interval: int
    data: dict
    sample_steps: int
    motion_frames: int
    clip_x0: float | None
    codec_kind: str
    seed: int
    out_dir: Path
    raw: dict

    def fingerprint(self) -> bytes:
        return config_fingerprint(self.raw.get("model", {}))


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UserError(f"cannot read config {path}: {e}") from e
    top = _take(
        raw,
        {
            "model": {}, "schedule": {}, "optim": {}, "train": {}, "data": {},
            "sample": {}, "seed": 0, "out_dir": "runs/out",
        },
        "top level",
    )
    m = _take(
        top["model"],
        {
            "layers": 12, "hidden": 768, "heads": 12, "patch": 2, "frames": 16,
            "latent": [32, 32, 4], "portrait_fusion": "symbiotic",
            "audio_fusion": "direct", "audio_tokens": 32,
            "audio_feature_dim": 800, "audio_hidden": 256, "audio_layers": 1,
            "mlp_ratio": 4, "learned_pos": False,
        },
        "model",
    )
    try:
        model = ModelConfig(
            layers=m["layers"], hidden=m["hidden"], heads=m["heads"],
            patch=m["patch"], frames=m["frames"], latent=tuple(m["latent"]),
            portrait_fusion=m["portrait_fusion"], audio_fusion=m["audio_fusion"],
            audio_tokens=m["audio_tokens"], audio_feature_dim=m["audio_feature_dim"],
            audio_hidden=m["audio_hidden"], audio_layers=m["audio_layers"],
            mlp_ratio=m["mlp_ratio"], learned_pos=m["learned_pos"],
        )
    except Exception as e:
        raise UserError(f"invalid model config: {e}") from e
    s = _take(top["schedule"], {"steps": 1000, "beta_min": 1e-4, "beta_max": 2e-2}, "schedule")
    o = _take(
        top["optim"],
        {"lr": 1e-4, "betas": [0.9, 0.999], "weight_decay": 0.0,
         "clip_norm": 1.0, "ema_decay": 0.9999},
        "optim",
    )
    t = _take(
        top["train"],
        {"total_steps": 1000, "batch_size": 8, "log_every": 50, "ckpt_every": 500,
         "lambda_vlb": 1.0, "zero_audio_prob": 0.1, "flip_prob": 0.5,
         "sampling_interval": 1},
        "train",
    )
    sa = _take(
        top["sample"],
        {"steps": 250, "motion_frames": 2, "clip_x0": None, "codec": "identity"},
        "sample",
    )
    if sa["motion_frames"] >= model.frames:
        raise UserError(
            f"motion_frames {sa['motion_frames']} must be < frames {model.frames}"
        )
    return RunConfig(
        model=model,
        schedule_steps=s["steps"], beta_min=s["beta_min"], beta_max=s["beta_max"],
        lr=o["lr"], betas=tuple(o["betas"]), weight_decay=o["weight_decay"],
        clip_norm=o["clip_norm"], ema_decay=o["ema_decay"],
        total_steps=t["total_steps"], batch_size=t["batch_size"],
        log_every=t["log_every"], ckpt_every=t["ckpt_every"],
        lambda_vlb=t["lambda_vlb"], zero_audio_prob=t["zero_audio_prob"],
        flip_prob=t["flip_prob"], sampling_interval=t["sampling_interval"],
        data=top["data"],
        sample_steps=sa["steps"], motion_frames=sa["motion_frames"],
        clip_x0=sa["clip_x0"], codec_kind=sa["codec"],
        seed=top["seed"], out_dir=Path(top["out_dir"]), raw=raw,
    )


# -- datasets -----------------------------------------------------------------


@dataclass
class VideoItem:
    latents: np.ndarray                 # (F_total, H, W, C)
    audio_windowed: np.ndarray | None   # (F_total, m)


class SyntheticDataset:
    """Deterministic smooth moving-blob latent videos with synthetic audio.

    Each video is a sum of drifting Gaussian blobs per channel plus a tone
    whose frequency identifies the video, so references and audio tokens
    carry enough signal to memorize the clips.
    """

    def __init__(self, config: RunConfig, num_videos: int, video_frames: int, seed: int):
        self.items: list[VideoItem] = []
        hl, wl, ch = config.model.latent
        extractor = audio_mod.LogMelExtractor()
        fps = 25
        k = audio_mod.FEATURE_RATE // fps
        for vi in range(num_videos):
            rng = np.random.default_rng((seed, vi))
            yy, xx = np.meshgrid(np.linspace(-1, 1, hl), np.linspace(-1, 1, wl), indexing="ij")
            lat = np.zeros((video_frames, hl, wl, ch), dtype=np.float32)
            for c in range(ch):
                cx, cy = rng.uniform(-0.5, 0.5, 2)
                vx, vy = rng.uniform(-0.08, 0.08, 2)
                amp = rng.uniform(0.5, 1.0)
                width = rng.uniform(0.25, 0.6)
                for f in range(video_frames):
                    g = np.exp(-(((xx - cx - vx * f) ** 2 + (yy - cy - vy * f) ** 2) / width**2))
                    lat[f, :, :, c] = amp * (2.0 * g - 1.0)
            n_samples = int(video_frames / fps * audio_mod.SAMPLE_RATE) + audio_mod.SAMPLE_RATE // fps
            tone = 220.0 * (vi + 1)
            tt = np.arange(n_samples) / audio_mod.SAMPLE_RATE
            wav = 0.5 * np.sin(2 * np.pi * tone * tt)
            feats = extractor.extract(wav)
            windowed = audio_mod.align_windows(feats, video_frames, video_fps=fps)
            self.items.append(VideoItem(latents=lat, audio_windowed=windowed.astype(np.float32)))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


class FileDataset:
    """Latent videos from .vtf files with optional same-stem .wav audio."""

    def __init__(self, config: RunConfig, video_dir, audio_dir=None):
        video_dir = Path(video_dir)
        if not video_dir.is_dir():
            raise UserError(f"video directory not found: {video_dir}")
        extractor = audio_mod.LogMelExtractor()
        self.items = []
        for vp in sorted(video_dir.glob("*.vtf")):
            lat = codec_mod.load_tensor(vp)
            windowed = None
            if audio_dir is not None:
                ap = Path(audio_dir) / (vp.stem + ".wav")
                if ap.exists():
                    wav, rate = audio_mod.load_wav(ap)
                    wav = audio_mod.resample_linear(wav, rate, audio_mod.SAMPLE_RATE)
                    feats = extractor.extract(wav)
                    windowed = audio_mod.align_windows(feats, lat.shape[0])
            self.items.append(VideoItem(latents=lat, audio_windowed=windowed))
        if not self.items:
            raise UserError(f"no .vtf videos in {video_dir}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


def build_dataset(config: RunConfig):
    d = dict(config.data)
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        spec = _take(d, {"num_videos": 4, "video_frames": 12, "seed": 0}, "data")
        return SyntheticDataset(config, spec["num_videos"], spec["video_frames"], spec["seed"])
    if kind == "files":
        spec = _take(d, {"video_dir": None, "audio_dir": None}, "data")
        if not spec["video_dir"]:
            raise UserError("data.kind='files' requires data.video_dir")
        return FileDataset(config, spec["video_dir"], spec["audio_dir"])
    raise UserError(f"unknown data kind: {kind}")


def sample_training_batch(dataset, config: RunConfig, step: int, motion_frames: int = 0):
    """Deterministic batch for a given step index (resume-stable)."""
    rng = np.random.default_rng((config.seed, step))
    gen = make_clips(
        dataset,
        clip_len=config.model.frames,
        sampling_interval=config.sampling_interval,
        flip_prob=config.flip_prob,
        rng=rng,
        motion_frames=motion_frames,
    )
    samples = [next(gen) for _ in range(config.batch_size)]
    batch = {
        "latents": np.stack([s.clip for s in samples]),
        "portrait": np.stack([s.reference for s in samples]),
    }
    if samples[0].audio is not None:
        batch["audio_windowed"] = np.stack([s.audio for s in samples])
    if motion_frames > 0:
        batch["motion"] = np.stack([s.motion for s in samples])
    return batch


# -- training -----------------------------------------------------------------


def run_train(config: RunConfig, resume=None) -> dict:
    """Full training run: checkpoints plus a CSV loss log; returns a summary."""
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(config)
    sched = build_schedule(config.schedule_steps, config.beta_min, config.beta_max)
    model = Denoiser(config.model, seed=config.seed)
    optim = AdamW(
        model.params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay
    )
    ema = Ema(model.params, decay=config.ema_decay)
    fp = config.fingerprint()

    start_step = 0
    if resume is not None:
        ck_fp, arrays = load_checkpoint(resume)
        if ck_fp != fp:
            raise UserError(f"checkpoint {resume} config fingerprint mismatch")
        _load_params(model, arrays, "model/")
        for k in model.params:
            ema.shadow[k] = arrays[f"ema/{k}"].astype(model.dtype).copy()
        optim.load_state_arrays(
            {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
        )
        start_step = int(arrays["meta/step"])

    log_path = out / "loss_log.csv"
    mode = "a" if start_step else "w"
    last_ckpt = out / "checkpoint.stdf" if start_step else None
    t0 = time.monotonic()
    summary = {"step": start_step, "loss_simple": float("nan"), "loss_vlb": float("nan")}
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss_simple", "loss_vlb", "grad_norm", "wall_time"])
        for step in range(start_step, config.total_steps):
            batch = sample_training_batch(dataset, config, step)
            rng = np.random.default_rng((config.seed, step, 1))
            try:
                losses = train_step(
                    model, batch, sched, optim, ema, rng,
                    lambda_vlb=config.lambda_vlb, clip_norm=config.clip_norm,
                    zero_audio_prob=config.zero_audio_prob,
                )
            except NonFiniteError as e:
                raise InternalError(
                    f"non-finite loss at step {step}; last good checkpoint: {last_ckpt}"
                ) from e
            summary = losses | {"step": step + 1}
            if (step + 1) % config.log_every == 0 or step == start_step:
                writer.writerow([
                    step + 1,
                    f"{losses['loss_simple']:.6f}",
                    f"{losses['loss_vlb']:.6f}",
                    f"{losses['grad_norm']:.6f}",
                    f"{time.monotonic() - t0:.3f}",
                ])
                fh.flush()
                log.info("step %d: %s", step + 1, losses)
            if (step + 1) % config.ckpt_every == 0 or step + 1 == config.total_steps:
                last_ckpt = out / "checkpoint.stdf"
                save_checkpoint(last_ckpt, fp, model.params, ema, optim, step=step + 1)
                # EMA weights standalone: evaluation always uses these.
                _save_ema_standalone(out / "ema.stdf", fp, model, ema, step + 1)
    summary["checkpoint"] = str(last_ckpt)
    summary["ema_checkpoint"] = str(out / "ema.stdf")
    return summary


def _save_ema_standalone(path, fp, model, ema: Ema, step: int) -> None:
    shadow_params = {k: Tensor(v) for k, v in ema.shadow.items()}
    save_checkpoint(path, fp, shadow_params, step=step)


def _load_params(model: Denoiser, arrays: dict, prefix: str) -> None:
    for k, p in model.params.items():
        key = prefix + k
        if key not in arrays:
            raise UserError(f"checkpoint missing parameter '{key}'")
        if arrays[key].shape != p.data.shape:
            raise UserError(
                f"checkpoint parameter '{key}' shape {arrays[key].shape} != {p.data.shape}"
            )
        p.data[...] = arrays[key].astype(model.dtype)


# -- sampling -----------------------------------------------------------------


def _load_reference(path, config: RunConfig, codec) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise UserError(f"reference not found: {path}")
    if path.suffix == ".vtf":
        ref = codec_mod.load_tensor(path)
    elif path.suffix == ".png":
        pixels = codec_mod.import_png_frames([path])
        ref = codec.encode(pixels)[0]
    else:
        raise UserError(f"unsupported reference format: {path.suffix}")
    if ref.ndim == 4 and ref.shape[0] == 1:
        ref = ref[0]
    if tuple(ref.shape) != tuple(config.model.latent):
        raise UserError(
            f"reference latent shape {ref.shape} != configured {config.model.latent}"
        )
    return ref


def _audio_tokens_for_frames(model: Denoiser, windowed: np.ndarray) -> np.ndarray:
    with no_grad():
        tok = model.audio_proj.forward(Tensor(windowed[None].astype(model.dtype)))
    return tok.data


def run_sample(
    config: RunConfig,
    ckpt_path,
    ref_path,
    audio_path=None,
    seed: int | None = None,
    zero_audio: bool = False,
    clips: int = 1,
    export_png: bool = False,
    record: list | None = None,
) -> dict:
    """Generate one or more chained clips; returns output file paths.

    Clips after the first receive the previous clip's last N latent frames
    as temporal-attention keys/values only (motion guidance); emitted clips
    are disjoint, so the output holds clips * frames frames.
    """
    seed = config.seed if seed is None else seed
    if clips < 1:
        raise UserError("clips must be >= 1")
    cfg = config.model
    n_motion = config.motion_frames
    if n_motion >= cfg.frames:
        raise UserError(f"motion frames {n_motion} must be < frames {cfg.frames}")

    fp = config.fingerprint()
    ck_fp, arrays = load_checkpoint(ckpt_path)
    if ck_fp != fp:
        raise UserError(f"checkpoint {ckpt_path} config fingerprint mismatch")
    model = Denoiser(cfg, seed=0)
    prefix = "ema/" if any(k.startswith("ema/") for k in arrays) else "model/"
    if prefix == "ema/":
        arrays = {k: v for k, v in arrays.items() if k != "ema/decay"}
    _load_params(model, arrays, prefix)

    codec = codec_mod.make_codec(config.codec_kind, expected_shape=cfg.latent)
    reference = _load_reference(ref_path, config, codec)

    total_frames = clips * cfg.frames
    if zero_audio:
        audio_tokens = np.zeros(
            (1, total_frames, cfg.audio_tokens, cfg.hidden), dtype=model.dtype
        )
    else:
        if audio_path is None:
            raise UserError("audio path required unless --zero-audio is set")
        apath = Path(audio_path)
        if apath.suffix == ".wav":
            wav, rate = audio_mod.load_wav(apath)
            wav = audio_mod.resample_linear(wav, rate, audio_mod.SAMPLE_RATE)
        else:
            wav = audio_mod.load_raw_f32(apath)
        extractor = audio_mod.LogMelExtractor()
        feats = extractor.extract(wav)
        covered = feats.data.shape[1] * 25 // audio_mod.FEATURE_RATE
        if covered < total_frames:
            raise UserError(
                f"audio covers {covered} video frames; need {total_frames} "
                f"({clips} clip(s) of {cfg.frames})"
            )
        windowed = audio_mod.align_windows(feats, total_frames)
        audio_tokens = _audio_tokens_for_frames(model, windowed.astype(model.dtype))

    sched = build_schedule(config.schedule_steps, config.beta_min, config.beta_max)
    shape = (1, cfg.frames) + tuple(cfg.latent)
    out_clips = []
    motion = None
    for k in range(clips):
        a_tok = audio_tokens[:, k * cfg.frames : (k + 1) * cfg.frames]
        mo = motion

        def denoise(x, t, _a=a_tok, _m=mo):
            return model.forward(
                x, t,
                portrait=reference[None],
                audio_tokens=Tensor(np.asarray(_a, dtype=model.dtype)),
                motion_latents=_m,
                record=record,
            )

        clip_seed = int(np.random.default_rng((seed, k)).integers(2**62))
        lat = ddpm_sample(
            denoise, shape, sched, steps=config.sample_steps,
            seed=clip_seed, dtype=model.dtype, clip_x0=config.clip_x0,
        ).data[0]
        out_clips.append(lat)
        if n_motion > 0:
            motion = lat[None, -n_motion:]

    latents = np.concatenate(out_clips, axis=0)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    lat_path = config.out_dir / f"sample_seed{seed}.vtf"
    codec_mod.save_tensor(lat_path, latents)
    result = {"latents": str(lat_path), "frames": int(latents.shape[0])}
    if config.codec_kind == "space_to_depth":
        pixels = codec.decode(latents)
        px_path = config.out_dir / f"sample_seed{seed}_pixels.vtf"
        codec_mod.save_tensor(px_path, pixels)
        result["pixels"] = str(px_path)
        if export_png:
            frames = codec_mod.export_png_frames(pixels, config.out_dir / f"sample_seed{seed}_png")
            result["png_dir"] = str(frames[0].parent)
    return result


# -- benchmark ------------------------------------------------------------------


def _bench_forward(x: Tensor, weights, factorized: bool, f: int, p: int) -> None:
    wq, wk, wv, wo = weights
    with no_grad():
        if factorized:
            sp = x.reshape(f, p, -1)
            attention(sp, sp, wq, wk, wv, wo, heads=1)
            tp = sp.swapaxes(0, 1)
            attention(tp, tp, wq, wk, wv, wo, heads=1)
        else:
            joint = x.reshape(1, f * p, -1)
            attention(joint, joint, wq, wk, wv, wo, heads=1)


def run_benchmark(f_list, p_list, dim: int = 64, reps: int = 5, out_dir=None) -> list[dict]:
    """Joint vs factorized attention: analytic counts, wall time, peak memory.

    Returns one row per (F, P) pair and writes bench.csv plus an aligned
    table when out_dir is given.
    """
    rng = np.random.default_rng(0)
    weights = tuple(
        Tensor((rng.standard_normal((dim, dim)) * 0.02).astype(np.float32))
        for _ in range(4)
    )
    rows = []
    for f in f_list:
        for p in p_list:
            x = Tensor(rng.standard_normal((f * p, dim)).astype(np.float32))
            row = {
                "F": f, "P": p, "dim": dim,
                "count_joint": count_attention_elements(f, p, factorized=False),
                "count_factorized": count_attention_elements(f, p, factorized=True),
            }
            for name, fact in (("joint", False), ("factorized", True)):
                times = []
                for _ in range(reps):
                    t0 = time.perf_counter()
                    _bench_forward(x, weights, fact, f, p)
                    times.append(time.perf_counter() - t0)
                tracemalloc.start()
                _bench_forward(x, weights, fact, f, p)
                _, peak = tracemalloc.get_traced_memory()
                tracemalloc.stop()
                row[f"time_{name}"] = float(np.median(times))
                row[f"peak_bytes_{name}"] = int(peak)
            rows.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fields = list(rows[0].keys())
        with open(out_dir / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
        (out_dir / "bench.txt").write_text(format_benchmark_table(rows))
    return rows


def format_benchmark_table(rows: list[dict]) -> str:
    headers = [
        "F", "P", "count_joint", "count_factorized",
        "time_joint", "time_factorized", "peak_joint", "peak_factorized",
    ]
    lines = []
    data = [
        [
            str(r["F"]), str(r["P"]),
            f"{r['count_joint']:,}", f"{r['count_factorized']:,}",
            f"{r['time_joint'] * 1e3:.2f}ms", f"{r['time_factorized'] * 1e3:.2f}ms",
            f"{r['peak_bytes_joint']:,}", f"{r['peak_bytes_factorized']:,}",
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(d[i]) for d in data)) for i, h in enumerate(headers)]
    lines.append("  ".join(h.rjust(w) for h, w in zip(headers, widths)))
    for d in data:
        lines.append("  ".join(v.rjust(w) for v, w in zip(d, widths)))
    return "\n".join(lines) + "\n"
