"""Condition-fusion schemes: direct cross-attention, siamese towers, and
symbiotic token concatenation, applicable independently per modality."""

from __future__ import annotations

import numpy as np

from .nn import ParamStore, attention, linear
from .tensor import Tensor, ShapeError, concat, gelu, layer_norm

SCHEMES = ("direct", "siamese", "symbiotic")

__all__ = [
    "SCHEMES",
    "symbiotic_prepare",
    "symbiotic_extract",
    "DirectFusionAdapter",
    "SiameseTower",
    "siamese_inject",
]


def symbiotic_prepare(portrait: Tensor, video: Tensor) -> Tensor:
    """Repeat condition tokens along the frame axis and append them after the
    video tokens on the position axis: (..., F, P, d) -> (..., F, 2P, d)."""
    if portrait.ndim != video.ndim - 1:
        raise ShapeError(
            f"portrait rank {portrait.ndim} must be video rank {video.ndim} - 1"
        )
    *lead, p, d = portrait.shape
    if video.shape[-2] != p or video.shape[-1] != d:
        raise ShapeError(
            f"portrait {portrait.shape} does not match video {video.shape}"
        )
    f = video.shape[-3]
    rep = portrait.reshape(*lead, 1, p, d).broadcast_to(video.shape)
    return concat([video, rep], axis=-2)


def symbiotic_extract(tokens: Tensor, keep: int | None = None) -> Tensor:
    """Return the leading (video) positions; the condition half is dropped."""
    s = tokens.shape[-2]
    if keep is None:
        if s % 2:
            raise ShapeError(f"position count {s} is odd; cannot split in half")
        keep = s // 2
    if not 0 < keep <= s:
        raise ShapeError(f"cannot keep {keep} of {s} positions")
    idx = (slice(None),) * (tokens.ndim - 2) + (slice(0, keep),)
    return tokens[idx]


class DirectFusionAdapter:
    """Per-block cross-attention from backbone queries to condition tokens.

    Value and output projections are bias-free and the output projection is
    zero-initialized, so an all-zero condition (and any condition at
    initialization) leaves the backbone tokens untouched.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int):
        self.heads = heads
        self.prefix = prefix
        self.ln_g = store.ones(prefix + "ln.gamma", (d,))
        self.ln_b = store.zeros(prefix + "ln.beta", (d,))
        self.wq = store.trunc_normal(prefix + "wq", (d, d))
        self.wk = store.trunc_normal(prefix + "wk", (d, d))
        self.wv = store.trunc_normal(prefix + "wv", (d, d))
        self.wo = store.zeros(prefix + "wo", (d, d))

    def __call__(self, x: Tensor, cond: Tensor, record: list | None = None) -> Tensor:
        """x: (B, F, S, d); cond: (B, F_c, A, d) with F_c in {F, 1}."""
        if cond.ndim != x.ndim or cond.shape[-1] != x.shape[-1]:
            raise ShapeError(f"condition {cond.shape} incompatible with {x.shape}")
        f = x.shape[-3]
        if cond.shape[-3] == 1 and f != 1:
            cond = cond.broadcast_to(cond.shape[:-3] + (f,) + cond.shape[-2:])
        elif cond.shape[-3] != f:
            raise ShapeError(
                f"condition frames {cond.shape[-3]} != backbone frames {f}"
            )
        q = layer_norm(x, self.ln_g, self.ln_b)
        branch = attention(
            q, cond, self.wq, self.wk, self.wv, self.wo, self.heads,
            record=record, tag=self.prefix + "cross",
        )
        return x + branch


class SiameseTower:
    """Condition tower mirroring backbone depth, one feature per block.

    ``kind='portrait'`` uses pre-norm self-attention + MLP blocks (the
    backbone's spatial block shape); ``kind='audio'`` uses two-layer MLP
    blocks. Parameters train jointly with the backbone.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        kind: str,
        depth: int,
        d: int,
        heads: int,
        mlp_ratio: int = 4,
    ):
        if kind not in ("portrait", "audio"):
            raise ValueError(f"unknown tower kind: {kind}")
        self.kind = kind
        self.depth = depth
        self.heads = heads
        self.blocks = []
        hidden = mlp_ratio * d
        for i in range(depth):
            pre = f"{prefix}block{i}."
            blk = {
                "ln1_g": store.ones(pre + "ln1.gamma", (d,)),
                "ln1_b": store.zeros(pre + "ln1.beta", (d,)),
                "w1": store.trunc_normal(pre + "mlp.w1", (d, hidden)),
                "b1": store.zeros(pre + "mlp.b1", (hidden,)),
                "w2": store.trunc_normal(pre + "mlp.w2", (hidden, d)),
                "b2": store.zeros(pre + "mlp.b2", (d,)),
                "inj_w": store.zeros(pre + "inject.w", (d, d)),
                "inj_b": store.zeros(pre + "inject.b", (d,)),
            }
            if kind == "portrait":
                blk.update(
                    ln0_g=store.ones(pre + "ln0.gamma", (d,)),
                    ln0_b=store.zeros(pre + "ln0.beta", (d,)),
                    wq=store.trunc_normal(pre + "attn.wq", (d, d)),
                    wk=store.trunc_normal(pre + "attn.wk", (d, d)),
                    wv=store.trunc_normal(pre + "attn.wv", (d, d)),
                    wo=store.trunc_normal(pre + "attn.wo", (d, d)),
                    bq=store.zeros(pre + "attn.bq", (d,)),
                    bk=store.zeros(pre + "attn.bk", (d,)),
                    bv=store.zeros(pre + "attn.bv", (d,)),
                    bo=store.zeros(pre + "attn.bo", (d,)),
                )
            self.blocks.append(blk)

    def forward(self, cond: Tensor) -> list[Tensor]:
        """Run the tower; returns one feature map per backbone block."""
        feats = []
        x = cond
        for blk in self.blocks:
            if self.kind == "portrait":
                h = layer_norm(x, blk["ln0_g"], blk["ln0_b"])
                x = x + attention(
                    h, h, blk["wq"], blk["wk"], blk["wv"], blk["wo"], self.heads,
                    bq=blk["bq"], bk=blk["bk"], bv=blk["bv"], bo=blk["bo"],
                )
            h = layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            x = x + linear(gelu(linear(h, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])
            feats.append(x)
        return feats


def siamese_inject(
    backbone_feat: Tensor, siamese_feat: Tensor, w: Tensor, b: Tensor
) -> Tensor:
    """Additive injection of a zero-initialized projection of a tower feature.

    The projected feature must broadcast over (positions, d), or cover a
    leading slice of the position axis (condition tokens guide the video
    positions they correspond to).
    """
    proj = linear(siamese_feat, w, b)
    s = backbone_feat.shape[-2]
    ps = proj.shape[-2]
    if ps == s or ps == 1:
        return backbone_feat + proj
    if ps < s:
        head_idx = (slice(None),) * (backbone_feat.ndim - 2) + (slice(0, ps),)
        tail_idx = (slice(None),) * (backbone_feat.ndim - 2) + (slice(ps, s),)
        return concat([backbone_feat[head_idx] + proj, backbone_feat[tail_idx]], axis=-2)
    raise ShapeError(
        f"siamese feature positions {ps} exceed backbone positions {s}"
    )
