"""Interleaved spatial-temporal diffusion transformer.

Each block runs temporal attention (per position, across frames, with
optional motion-frame keys/values), a linear bridge on the attention
output, spatial attention (per frame, across positions), the condition
fusion hooks, and a GELU MLP. All gated sub-layers are adaLN-modulated
from the timestep embedding and zero-initialized, so a fresh block is the
identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fusion
from .audio import AudioProjector
from .diffusion import ModelOutput, ParameterError
from .nn import ParamStore, attention, linear, patchify, sinusoidal_embedding, unpatchify
from .tensor import Tensor, ShapeError, concat, gelu, layer_norm, silu

__all__ = ["ModelConfig", "Denoiser", "count_attention_elements", "timestep_features"]

TIME_FREQ_DIM = 256


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 12
    hidden: int = 768
    heads: int = 12
    patch: int = 2
    frames: int = 16
    latent: tuple[int, int, int] = (32, 32, 4)  # (H, W, C)
    portrait_fusion: str = "symbiotic"
    audio_fusion: str = "direct"
    audio_tokens: int = 32
    audio_feature_dim: int = 800  # flattened sliding-window width per frame
    audio_hidden: int = 256
    audio_layers: int = 1
    mlp_ratio: int = 4
    learned_pos: bool = False

    def __post_init__(self):
        hl, wl, _ = self.latent
        if self.hidden % self.heads:
            raise ParameterError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if hl % self.patch or wl % self.patch:
            raise ParameterError(f"latent ({hl}, {wl}) not divisible by patch {self.patch}")
        for scheme, what in ((self.portrait_fusion, "portrait"), (self.audio_fusion, "audio")):
            if scheme not in fusion.SCHEMES:
                raise ParameterError(f"unknown {what} fusion scheme: {scheme}")

    @property
    def patches_per_frame(self) -> int:
        hl, wl, _ = self.latent
        return (hl // self.patch) * (wl // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent[2]


def count_attention_elements(f: int, p: int, factorized: bool) -> int:
    """Attention-matrix element count per layer per head.

    Joint attention over all F*P tokens costs F^2 * P^2 elements; the
    factorized spatial+temporal split costs F * P^2 + P * F^2.
    """
    if f < 1 or p < 1:
        raise ParameterError(f"F and P must be >= 1, got {f}, {p}")
    return f * p * p + p * f * f if factorized else f * f * p * p


def timestep_features(t, dim: int = TIME_FREQ_DIM) -> np.ndarray:
    """Raw sinusoidal timestep features (pre-MLP), shape (len(t), dim)."""
    return sinusoidal_embedding(t, dim)


class Denoiser:
    """The full conditional denoiser: (x_t, t, conditions) -> (eps, v)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        store = ParamStore(rng, dtype)
        self.store = store
        c = config
        d = c.hidden

        store.trunc_normal("patch_embed.w", (c.patch_dim, d))
        store.zeros("patch_embed.b", (d,))
        store.trunc_normal("t_embed.w1", (TIME_FREQ_DIM, d))
        store.zeros("t_embed.b1", (d,))
        store.trunc_normal("t_embed.w2", (d, d))
        store.zeros("t_embed.b2", (d,))

        if c.learned_pos:
            store.constant(
                "pos.spatial", sinusoidal_embedding(np.arange(c.patches_per_frame), d)
            )
            store.constant("pos.temporal", sinusoidal_embedding(np.arange(c.frames), d))
        if c.portrait_fusion == "symbiotic":
            store.trunc_normal("portrait_segment", (d,))
        if c.audio_fusion == "symbiotic":
            store.trunc_normal("audio_segment", (d,))

        self.audio_proj = AudioProjector(
            store,
            "audio_proj.",
            feature_dim=c.audio_feature_dim,
            hidden=c.audio_hidden,
            tokens=c.audio_tokens,
            width=d,
            layers=c.audio_layers,
        )

        self.blocks = []
        for i in range(c.layers):
            pre = f"block{i}."
            blk = {
                "adaln_w": store.zeros(pre + "adaln.w", (d, 9 * d)),
                "adaln_b": store.zeros(pre + "adaln.b", (9 * d,)),
                "bridge_w": store.trunc_normal(pre + "bridge.w", (d, d)),
                "bridge_b": store.zeros(pre + "bridge.b", (d,)),
            }
            for sub in ("temporal", "spatial"):
                blk[sub] = {
                    "ln_g": store.ones(f"{pre}{sub}.ln.gamma", (d,)),
                    "ln_b": store.zeros(f"{pre}{sub}.ln.beta", (d,)),
                    "wq": store.trunc_normal(f"{pre}{sub}.wq", (d, d)),
                    "wk": store.trunc_normal(f"{pre}{sub}.wk", (d, d)),
                    "wv": store.trunc_normal(f"{pre}{sub}.wv", (d, d)),
                    "wo": store.trunc_normal(f"{pre}{sub}.wo", (d, d)),
                    "bq": store.zeros(f"{pre}{sub}.bq", (d,)),
                    "bk": store.zeros(f"{pre}{sub}.bk", (d,)),
                    "bv": store.zeros(f"{pre}{sub}.bv", (d,)),
                    "bo": store.zeros(f"{pre}{sub}.bo", (d,)),
                }
            blk["mlp"] = {
                "ln_g": store.ones(pre + "mlp.ln.gamma", (d,)),
                "ln_b": store.zeros(pre + "mlp.ln.beta", (d,)),
                "w1": store.trunc_normal(pre + "mlp.w1", (d, c.mlp_ratio * d)),
                "b1": store.zeros(pre + "mlp.b1", (c.mlp_ratio * d,)),
                "w2": store.trunc_normal(pre + "mlp.w2", (c.mlp_ratio * d, d)),
                "b2": store.zeros(pre + "mlp.b2", (d,)),
            }
            if c.portrait_fusion == "direct":
                blk["portrait_adapter"] = fusion.DirectFusionAdapter(
                    store, pre + "portrait_fuse.", d, c.heads
                )
            if c.audio_fusion == "direct":
                blk["audio_adapter"] = fusion.DirectFusionAdapter(
                    store, pre + "audio_fuse.", d, c.heads
                )
            self.blocks.append(blk)

        self.portrait_tower = None
        if c.portrait_fusion == "siamese":
            self.portrait_tower = fusion.SiameseTower(
                store, "siamese_portrait.", "portrait", c.layers, d, c.heads, c.mlp_ratio
            )
        self.audio_tower = None
        if c.audio_fusion == "siamese":
            self.audio_tower = fusion.SiameseTower(
                store, "siamese_audio.", "audio", c.layers, d, c.heads, c.mlp_ratio
            )

        store.zeros("final.adaln.w", (d, 2 * d))
        store.zeros("final.adaln.b", (2 * d,))
        store.ones("final.ln.gamma", (d,))
        store.zeros("final.ln.beta", (d,))
        store.zeros("final.head.w", (d, c.patch_dim * 2))
        store.zeros("final.head.b", (c.patch_dim * 2,))

        self._pos_spatial = sinusoidal_embedding(np.arange(c.patches_per_frame), d)
        self._pos_temporal = sinusoidal_embedding(np.arange(c.frames), d)

    # -- properties ------------------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    def num_params(self) -> int:
        return self.store.num_params()

    # -- embedding helpers -------------------------------------------------------

    def _add_spatial_pos(self, tok: Tensor) -> Tensor:
        """tok: (..., P, d); the table broadcasts over leading axes."""
        if self.config.learned_pos:
            return tok + self.store["pos.spatial"]
        return tok + Tensor(self._pos_spatial.astype(self.dtype))

    def _temporal_pos(self, indices) -> Tensor:
        idx = np.asarray(indices)
        if self.config.learned_pos and np.array_equal(idx, np.arange(self.config.frames)):
            return self.store["pos.temporal"]
        # Motion frames carry negative indices; sinusoidal covers any index.
        return Tensor(sinusoidal_embedding(idx, self.config.hidden).astype(self.dtype))

    def embed_timestep(self, t) -> Tensor:
        """Sinusoidal frequency features of t followed by the 2-layer MLP."""
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 1):
            raise ParameterError(f"timestep must be >= 1, got {t}")
        feats = Tensor(timestep_features(t).astype(self.dtype))
        s = self.store
        h = silu(linear(feats, s["t_embed.w1"], s["t_embed.b1"]))
        return linear(h, s["t_embed.w2"], s["t_embed.b2"])

    def embed_latent_frames(self, latents: Tensor, temporal_indices) -> Tensor:
        """Patchify + project + positional embeddings for (B, F', H, W, C)."""
        c = self.config
        tok = patchify(latents, c.patch)
        tok = linear(tok, self.store["patch_embed.w"], self.store["patch_embed.b"])
        tok = self._add_spatial_pos(tok)
        n_frames = tok.shape[1]
        pos_t = self._temporal_pos(temporal_indices).reshape(1, n_frames, 1, c.hidden)
        return tok + pos_t

    def embed_portrait(self, portrait: Tensor) -> Tensor:
        """(B, H, W, C) -> (B, 1, P, d): spatial pos, zero temporal, segment tag."""
        c = self.config
        tok = patchify(portrait, c.patch)
        tok = linear(tok, self.store["patch_embed.w"], self.store["patch_embed.b"])
        tok = self._add_spatial_pos(tok)
        if c.portrait_fusion == "symbiotic":
            tok = tok + self.store["portrait_segment"]
        b, p, d = tok.shape
        return tok.reshape(b, 1, p, d)

    # -- block forward -----------------------------------------------------------

    @staticmethod
    def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        return x * (scale + 1.0) + shift

    def _block_forward(
        self,
        x: Tensor,
        blk: dict,
        t_emb: Tensor,
        motion_tokens: Tensor | None,
        portrait_cond: Tensor | None,
        audio_cond: Tensor | None,
        record: list | None,
        tag: str,
    ) -> Tensor:
        b, f, s, d = x.shape
        mod = linear(silu(t_emb), blk["adaln_w"], blk["adaln_b"])
        parts = [
            mod[:, i * d : (i + 1) * d].reshape(b, 1, 1, d) for i in range(9)
        ]
        (sh_t, sc_t, g_t, sh_s, sc_s, g_s, sh_m, sc_m, g_m) = parts

        # Temporal attention across frames, per position; motion frames join
        # the key/value axis only.
        tp = blk["temporal"]
        h = self._modulate(layer_norm(x, tp["ln_g"], tp["ln_b"]), sh_t, sc_t)
        q = h.swapaxes(1, 2)  # (B, S, F, d)
        if motion_tokens is not None:
            m = self._modulate(
                layer_norm(motion_tokens, tp["ln_g"], tp["ln_b"]), sh_t, sc_t
            )
            kv = concat([m.swapaxes(1, 2), q], axis=-2)  # (B, S, Fm + F, d)
        else:
            kv = q
        att = attention(
            q, kv, tp["wq"], tp["wk"], tp["wv"], tp["wo"], self.config.heads,
            bq=tp["bq"], bk=tp["bk"], bv=tp["bv"], bo=tp["bo"],
            record=record, tag=tag + "temporal",
        ).swapaxes(1, 2)
        x = x + g_t * linear(att, blk["bridge_w"], blk["bridge_b"])

        # Spatial attention across positions, per frame.
        sp = blk["spatial"]
        h = self._modulate(layer_norm(x, sp["ln_g"], sp["ln_b"]), sh_s, sc_s)
        att = attention(
            h, h, sp["wq"], sp["wk"], sp["wv"], sp["wo"], self.config.heads,
            bq=sp["bq"], bk=sp["bk"], bv=sp["bv"], bo=sp["bo"],
            record=record, tag=tag + "spatial",
        )
        x = x + g_s * att

        if "portrait_adapter" in blk and portrait_cond is not None:
            x = blk["portrait_adapter"](x, portrait_cond, record=record)
        if "audio_adapter" in blk and audio_cond is not None:
            x = blk["audio_adapter"](x, audio_cond, record=record)

        mp = blk["mlp"]
        h = self._modulate(layer_norm(x, mp["ln_g"], mp["ln_b"]), sh_m, sc_m)
        h = linear(gelu(linear(h, mp["w1"], mp["b1"])), mp["w2"], mp["b2"])
        return x + g_m * h

    # -- full forward --------------------------------------------------------------

    def forward(
        self,
        latent,
        t,
        portrait=None,
        audio_tokens=None,
        audio_windowed=None,
        motion_latents=None,
        record: list | None = None,
    ) -> ModelOutput:
        """Predict (eps, v) for a noisy latent video.

        latent: (B, F, H, W, C); t: per-sample original-scale timesteps;
        portrait: (B, H, W, C); audio_tokens: (B, F, A, d) pre-projected, or
        audio_windowed: (B, F, m) raw sliding-window features; motion_latents:
        (B, Fm, H, W, C) clean latent frames from the previous clip.
        """
        c = self.config
        x_in = latent if isinstance(latent, Tensor) else Tensor(np.asarray(latent, dtype=self.dtype))
        if x_in.ndim != 5:
            raise ShapeError(f"latent must be (B, F, H, W, C), got {x_in.shape}")
        b, f, hl, wl, ch = x_in.shape
        if (hl, wl, ch) != tuple(c.latent) or f != c.frames:
            raise ShapeError(
                f"latent shape {x_in.shape[1:]} does not match config "
                f"(frames={c.frames}, latent={c.latent})"
            )
        p_count = c.patches_per_frame

        tokens = self.embed_latent_frames(x_in, np.arange(f))
        t_emb = self.embed_timestep(t)
        if t_emb.shape[0] == 1 and b > 1:
            t_emb = t_emb.broadcast_to((b, c.hidden))

        portrait_tok = None
        if portrait is not None:
            pt = portrait if isinstance(portrait, Tensor) else Tensor(np.asarray(portrait, dtype=self.dtype))
            portrait_tok = self.embed_portrait(pt)  # (B, 1, P, d)

        if audio_tokens is None and audio_windowed is not None:
            audio_tokens = self.audio_proj.forward(
                Tensor(np.asarray(audio_windowed, dtype=self.dtype))
            )
        elif audio_tokens is not None and not isinstance(audio_tokens, Tensor):
            audio_tokens = Tensor(np.asarray(audio_tokens, dtype=self.dtype))

        motion_tokens = None
        if motion_latents is not None:
            ml = motion_latents if isinstance(motion_latents, Tensor) else Tensor(
                np.asarray(motion_latents, dtype=self.dtype)
            )
            n_m = ml.shape[1]
            if n_m >= f:
                raise ShapeError(f"motion frame count {n_m} must be < frames {f}")
            motion_tokens = self.embed_latent_frames(ml, np.arange(-n_m, 0))

        # Entry concatenation for symbiotic schemes.
        if c.portrait_fusion == "symbiotic":
            if portrait_tok is None:
                raise ShapeError("symbiotic portrait fusion requires a portrait")
            tokens = fusion.symbiotic_prepare(
                portrait_tok.reshape(b, p_count, c.hidden), tokens
            )
            if motion_tokens is not None:
                motion_tokens = fusion.symbiotic_prepare(
                    portrait_tok.reshape(b, p_count, c.hidden), motion_tokens
                )
        if c.audio_fusion == "symbiotic" and audio_tokens is not None:
            atok = audio_tokens + self.store["audio_segment"]
            tokens = concat([tokens, atok], axis=-2)
            if motion_tokens is not None:
                pad = Tensor(
                    np.zeros(
                        (b, motion_tokens.shape[1], c.audio_tokens, c.hidden),
                        dtype=self.dtype,
                    )
                )
                motion_tokens = concat([motion_tokens, pad], axis=-2)

        portrait_cond = portrait_tok if c.portrait_fusion == "direct" else None
        audio_cond = audio_tokens if c.audio_fusion == "direct" else None

        portrait_feats = None
        if self.portrait_tower is not None and portrait_tok is not None:
            portrait_feats = self.portrait_tower.forward(
                portrait_tok.reshape(b, p_count, c.hidden)
            )
        audio_feats = None
        if self.audio_tower is not None and audio_tokens is not None:
            audio_feats = self.audio_tower.forward(audio_tokens)

        for i, blk in enumerate(self.blocks):
            tokens = self._block_forward(
                tokens, blk, t_emb, motion_tokens,
                portrait_cond, audio_cond, record, f"block{i}.",
            )
            if portrait_feats is not None:
                pf = portrait_feats[i]
                tokens = fusion.siamese_inject(
                    tokens,
                    pf.reshape(b, 1, p_count, c.hidden),
                    self.portrait_tower.blocks[i]["inj_w"],
                    self.portrait_tower.blocks[i]["inj_b"],
                )
            if audio_feats is not None:
                af = audio_feats[i].mean(axis=-2, keepdims=True)  # pool context tokens
                tokens = fusion.siamese_inject(
                    tokens,
                    af,
                    self.audio_tower.blocks[i]["inj_w"],
                    self.audio_tower.blocks[i]["inj_b"],
                )

        video_tokens = fusion.symbiotic_extract(tokens, keep=p_count)
        return self._final_head(video_tokens, t_emb)

    def _final_head(self, tokens: Tensor, t_emb: Tensor) -> ModelOutput:
        c = self.config
        s = self.store
        b = tokens.shape[0]
        mod = linear(silu(t_emb), s["final.adaln.w"], s["final.adaln.b"])
        d = c.hidden
        shift = mod[:, :d].reshape(b, 1, 1, d)
        scale = mod[:, d:].reshape(b, 1, 1, d)
        h = self._modulate(layer_norm(tokens, s["final.ln.gamma"], s["final.ln.beta"]), shift, scale)
        out = linear(h, s["final.head.w"], s["final.head.b"])
        hl, wl, ch = c.latent
        both = unpatchify(out, c.patch, hl, wl, 2 * ch)
        eps = both[..., :ch]
        v = both[..., ch:]
        return ModelOutput(eps_pred=eps, v_pred=v)

    def __call__(self, *args, **kwargs) -> ModelOutput:
        return self.forward(*args, **kwargs)
