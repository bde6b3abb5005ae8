"""Improved ViT branch: multi-channel patch segmentation, in-patch
convolution embedding, token-width unification, one shared encoder.

The image is tiled at several patch sizes (16 and 32 by default).  Each
channel embeds its patches either through a small conv stack or a plain
flatten, then a per-channel projection brings every channel's tokens to
a common width (75) so a single transformer encoder serves them all.
Per-channel class-token outputs are averaged into the branch feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    ShapeError,
    add,
    broadcast_to,
    concat,
    conv2d,
    gelu,
    matmul,
    maxpool2d,
    relu,
    reshape,
    scale,
    softmax,
    layernorm,
    transpose,
)

EMBED_PATHS = ("convblock", "conv_only", "linear")


@dataclass(frozen=True)
class ChannelSpec:
    """One segmentation channel: patch size and embedding path."""

    patch: int = 16
    embed: str = "convblock"

    def __post_init__(self):
        if self.embed not in EMBED_PATHS:
            raise ConfigError(f"unknown embed path {self.embed!r}; expected {EMBED_PATHS}")
        if self.patch < 2:
            raise ConfigError(f"patch size must be >= 2, got {self.patch}")

    def conv_spatial(self) -> tuple[int, int]:
        """(after-conv, after-pool) spatial extents for the conv paths."""
        s1 = (self.patch + 2 * 3 - 7) // 2 + 1
        s2 = (s1 + 2 * 1 - 2) // 2 + 1
        return s1, s2

    @property
    def raw_dim(self) -> int:
        if self.embed == "convblock":
            return 3 * self.conv_spatial()[1] ** 2
        if self.embed == "conv_only":
            return 3 * self.conv_spatial()[0] ** 2
        return 3 * self.patch ** 2

    def token_count(self, image_size: int) -> int:
        return (image_size // self.patch) ** 2


@dataclass
class ViTConfig:
    image_size: int = 224
    channels: tuple[ChannelSpec, ...] = (
        ChannelSpec(16, "convblock"),
        ChannelSpec(32, "conv_only"),
    )
    dim: int = 75
    depth: int = 6
    heads: int = 3
    mlp_hidden: int = 300
    classes: int = 6
    eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.channels, list):
            self.channels = tuple(self.channels)
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.classes < 2:
            raise ConfigError("depth must be >= 1 and classes >= 2")
        for ch in self.channels:
            if self.image_size % ch.patch != 0:
                raise ConfigError(
                    f"patch size {ch.patch} does not divide image size {self.image_size}"
                )

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class TokenSequence:
    """Per-channel token matrix with class token prepended."""

    channel: int
    tokens: Tensor  # (count + 1, dim)
    position_added: bool = False


# ---------------------------------------------------------------------------
# segmentation


def patchify(img: Tensor, patch: int) -> Tensor:
    """Non-overlapping row-major tiling; [3,S,S] -> [(S/P)^2, 3, P, P].

    A batched input [B,3,S,S] yields [B, (S/P)^2, 3, P, P].
    """
    batched = img.ndim == 4
    if not batched and img.ndim != 3:
        raise ShapeError(f"patchify: expected [3,S,S] or [B,3,S,S], got {img.shape}")
    s = img.shape[-1]
    if img.shape[-2] != s or img.shape[-3] != 3:
        raise ShapeError(f"patchify: expected square RGB input, got {img.shape}")
    if s % patch != 0:
        raise ConfigError(f"patchify: patch {patch} does not divide image size {s}")
    n_side = s // patch
    if not batched:
        x = reshape(img, (3, n_side, patch, n_side, patch))
        x = transpose(x, (1, 3, 0, 2, 4))
        return reshape(x, (n_side * n_side, 3, patch, patch))
    b = img.shape[0]
    x = reshape(img, (b, 3, n_side, patch, n_side, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, n_side * n_side, 3, patch, patch))


def unpatchify(patches: Tensor, image_size: int) -> Tensor:
    """Inverse tiling; [(S/P)^2, 3, P, P] -> [3, S, S]."""
    n, c, p, _ = patches.shape
    n_side = image_size // p
    if n_side * n_side != n:
        raise ShapeError(f"unpatchify: {n} patches of size {p} do not tile {image_size}")
    x = reshape(patches, (n_side, n_side, c, p, p))
    x = transpose(x, (2, 0, 3, 1, 4))
    return reshape(x, (c, image_size, image_size))


# ---------------------------------------------------------------------------
# in-patch embedding


def conv_block_embed(patches: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """conv(k7,s2,p3) -> relu -> maxpool(k2,s2,p1) -> flatten.

    For 16x16 patches the stage trace is 16 -> 8 -> 5 and the output
    width is 75 per patch.
    """
    if patches.ndim != 4:
        raise ShapeError(f"conv_block_embed: expected [M,3,P,P], got {patches.shape}")
    p = patches.shape[-1]
    y = conv2d(patches, w, b, stride=2, pad=3)
    assert y.shape[-1] == (p + 6 - 7) // 2 + 1
    y = relu(y)
    y = maxpool2d(y, 2, 2, 1)
    assert y.shape[-1] == (patches.shape[-1] // 2) // 2 + 1
    return reshape(y, (patches.shape[0], -1))


def conv_only_embed(patches: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """conv(k7,s2,p3) -> relu -> flatten; 32 -> 16 spatial, width 768."""
    if patches.ndim != 4:
        raise ShapeError(f"conv_only_embed: expected [M,3,P,P], got {patches.shape}")
    p = patches.shape[-1]
    y = conv2d(patches, w, b, stride=2, pad=3)
    assert y.shape[-1] == (p + 6 - 7) // 2 + 1
    y = relu(y)
    return reshape(y, (patches.shape[0], -1))


def unify(tokens: Tensor, w_unify: Tensor) -> Tensor:
    """Per-channel projection onto the shared token width."""
    if tokens.ndim != 2 or w_unify.ndim != 2:
        raise ShapeError(f"unify: expected 2-D operands, got {tokens.shape}, {w_unify.shape}")
    if tokens.shape[1] != w_unify.shape[0]:
        raise ShapeError(
            f"unify: token width {tokens.shape[1]} does not match matrix {w_unify.shape}"
        )
    return matmul(tokens, w_unify)


# ---------------------------------------------------------------------------
# encoder


def multi_head_attention(x: Tensor, params: dict, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention; returns (output, weights).

    ``x`` is [B, n, d]; weights come back as [B, heads, n, n] with rows
    summing to 1.
    """
    bsz, n, d = x.shape
    hd = d // heads
    flat = reshape(x, (bsz * n, d))

    def proj(name):
        y = add(matmul(flat, params[f"{prefix}.w{name}"]), params[f"{prefix}.b{name}"])
        return transpose(reshape(y, (bsz, n, heads, hd)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)  # [B, heads, n, hd]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz * n, d))
    out = add(matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    return reshape(out, (bsz, n, d)), weights


def _encode(tokens: Tensor, params: dict, cfg: ViTConfig) -> Tensor:
    """Pre-norm transformer stack shared by every channel."""
    bsz, n, d = tokens.shape
    for l in range(cfg.depth):
        h = layernorm(tokens, params[f"enc{l}.ln1.g"], params[f"enc{l}.ln1.b"], cfg.eps)
        attn_out, _ = multi_head_attention(h, params, f"enc{l}.attn", cfg.heads)
        tokens = add(tokens, attn_out)
        h = layernorm(tokens, params[f"enc{l}.ln2.g"], params[f"enc{l}.ln2.b"], cfg.eps)
        flat = reshape(h, (bsz * n, d))
        m = gelu(add(matmul(flat, params[f"enc{l}.mlp.w1"]), params[f"enc{l}.mlp.b1"]))
        m = add(matmul(m, params[f"enc{l}.mlp.w2"]), params[f"enc{l}.mlp.b2"])
        tokens = add(tokens, reshape(m, (bsz, n, d)))
    return tokens


# ---------------------------------------------------------------------------
# parameter initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ViTBranch:
    """Multi-channel ViT with a single shared encoder and linear head."""

    def __init__(self, config: ViTConfig, seed: int = 0, dtype: str = "f32"):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
        d = config.dim
        p: dict[str, np.ndarray] = {"cls": trunc_normal(rng, (d,))}
        for i, ch in enumerate(config.channels):
            n = ch.token_count(config.image_size)
            p[f"ch{i}.pos"] = trunc_normal(rng, (n + 1, d))
            if ch.embed in ("convblock", "conv_only"):
                p[f"ch{i}.conv.w"] = kaiming_uniform(rng, (3, 3, 7, 7))
                p[f"ch{i}.conv.b"] = np.zeros(3)
            p[f"ch{i}.unify"] = trunc_normal(rng, (ch.raw_dim, d))
        for l in range(config.depth):
            for name in ("q", "k", "v", "o"):
                p[f"enc{l}.attn.w{name}"] = trunc_normal(rng, (d, d))
                p[f"enc{l}.attn.b{name}"] = np.zeros(d)
            p[f"enc{l}.ln1.g"] = np.ones(d)
            p[f"enc{l}.ln1.b"] = np.zeros(d)
            p[f"enc{l}.ln2.g"] = np.ones(d)
            p[f"enc{l}.ln2.b"] = np.zeros(d)
            p[f"enc{l}.mlp.w1"] = trunc_normal(rng, (d, config.mlp_hidden))
            p[f"enc{l}.mlp.b1"] = np.zeros(config.mlp_hidden)
            p[f"enc{l}.mlp.w2"] = trunc_normal(rng, (config.mlp_hidden, d))
            p[f"enc{l}.mlp.b2"] = np.zeros(d)
        p["head.w"] = trunc_normal(rng, (d, config.classes))
        p["head.b"] = np.zeros(config.classes)
        self.params = {k: Tensor(v, dtype=dtype, requires_grad=True) for k, v in p.items()}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def embed_channel(self, images: Tensor, index: int) -> Tensor:
        """Patchify + embed + unify one channel; [B,3,S,S] -> [B, n, dim]."""
        cfg = self.config
        ch = cfg.channels[index]
        bsz = images.shape[0]
        n = ch.token_count(cfg.image_size)
        patches = patchify(images, ch.patch)
        flat_patches = reshape(patches, (bsz * n, 3, ch.patch, ch.patch))
        if ch.embed == "convblock":
            raw = conv_block_embed(flat_patches,
                                   self.params[f"ch{index}.conv.w"],
                                   self.params[f"ch{index}.conv.b"])
        elif ch.embed == "conv_only":
            raw = conv_only_embed(flat_patches,
                                  self.params[f"ch{index}.conv.w"],
                                  self.params[f"ch{index}.conv.b"])
        else:
            raw = reshape(flat_patches, (bsz * n, ch.raw_dim))
        unified = unify(raw, self.params[f"ch{index}.unify"])
        assert unified.shape == (bsz * n, cfg.dim)
        return reshape(unified, (bsz, n, cfg.dim))

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """[B,3,S,S] -> (logits [B,K], features [B,dim])."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"vit forward: expected [B,3,{cfg.image_size},{cfg.image_size}], got {images.shape}"
            )
        bsz = images.shape[0]
        cls_row = reshape(self.params["cls"], (1, 1, cfg.dim))
        outs = []
        for i in range(len(cfg.channels)):
            tokens = self.embed_channel(images, i)
            seq = concat([broadcast_to(cls_row, (bsz, 1, cfg.dim)), tokens], axis=1)
            seq = add(seq, self.params[f"ch{i}.pos"])
            encoded = _encode(seq, self.params, cfg)
            outs.append(encoded[:, 0, :])
        feats = outs[0]
        for o in outs[1:]:
            feats = add(feats, o)
        if len(outs) > 1:
            feats = scale(feats, 1.0 / len(outs))
        logits = add(matmul(feats, self.params["head.w"]), self.params["head.b"])
        return logits, feats

    def forward_single(self, img: Tensor) -> tuple[Tensor, Tensor]:
        """[3,S,S] -> (logits [K], features [dim])."""
        logits, feats = self.forward(reshape(img, (1,) + tuple(img.shape)))
        return logits[0], feats[0]


def encoder_forward(seq: TokenSequence, branch: ViTBranch) -> Tensor:
    """Run one prepared token sequence through the shared encoder stack,
    returning the final class-token vector."""
    if not seq.position_added:
        raise ConfigError("encoder_forward: positional embedding not added")
    tokens = reshape(seq.tokens, (1,) + tuple(seq.tokens.shape))
    encoded = _encode(tokens, branch.params, branch.config)
    return encoded[0, 0, :]


# ---------------------------------------------------------------------------
# compression accounting


def compression_ratio(raw_dim: int, conv_dim: int) -> float:
    """Embedded size over raw flattened size (75/768 = 0.09765625)."""
    if raw_dim <= 0 or conv_dim <= 0:
        raise ConfigError("compression_ratio: dims must be positive")
    return conv_dim / raw_dim


def format_ratio_percent(ratio: float) -> str:
    return f"{ratio * 100:.2f}%"


def element_saving(raw_dim: int, conv_dim: int, tokens: int) -> int:
    """Per-image element saving of conv embedding vs raw flatten."""
    return (raw_dim - conv_dim) * tokens
