"""Bottleneck-residual CNN branch.

The full preset mirrors the standard 50-layer architecture; the desk
preset is a narrow [1,1,1,1] variant sharing all code paths.  Per-conv
normalization is a batch-statistics-free per-channel affine (instance
statistics over spatial dims) so batches of 1 remain valid; it can be
switched off, as can the residual adds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import (
    Tensor,
    ShapeError,
    add,
    conv2d,
    instance_norm2d,
    matmul,
    maxpool2d,
    mean,
    relu,
)
from .vit import kaiming_uniform, trunc_normal


@dataclass
class ResNetConfig:
    stem_width: int = 16
    stage_blocks: tuple[int, ...] = (1, 1, 1, 1)
    stage_widths: tuple[int, ...] = (32, 64, 128, 256)
    bottleneck: int = 4
    classes: int = 6
    norm: bool = True
    residual: bool = True

    def __post_init__(self):
        if isinstance(self.stage_blocks, list):
            self.stage_blocks = tuple(self.stage_blocks)
        if isinstance(self.stage_widths, list):
            self.stage_widths = tuple(self.stage_widths)
        if len(self.stage_blocks) != len(self.stage_widths):
            raise ConfigError("stage_blocks and stage_widths differ in length")
        for w in self.stage_widths:
            if w % self.bottleneck != 0:
                raise ConfigError(f"stage width {w} not divisible by bottleneck {self.bottleneck}")

    @classmethod
    def resnet50(cls, classes: int = 1000, **kw) -> "ResNetConfig":
        return cls(stem_width=64, stage_blocks=(3, 4, 6, 3),
                   stage_widths=(256, 512, 1024, 2048), classes=classes, **kw)

    @classmethod
    def desk(cls, classes: int = 6, **kw) -> "ResNetConfig":
        return cls(classes=classes, **kw)

    @property
    def feature_width(self) -> int:
        return self.stage_widths[-1]


class ResNetBranch:
    def __init__(self, config: ResNetConfig, seed: int = 0, dtype: str = "f32"):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
        p: dict[str, np.ndarray] = {
            "stem.conv.w": kaiming_uniform(rng, (config.stem_width, 3, 7, 7)),
        }
        if config.norm:
            p["stem.norm.g"] = np.ones(config.stem_width)
            p["stem.norm.b"] = np.zeros(config.stem_width)
        cin = config.stem_width
        for s, (blocks, width) in enumerate(zip(config.stage_blocks, config.stage_widths)):
            mid = width // config.bottleneck
            for b in range(blocks):
                pre = f"s{s}.b{b}"
                stride = 2 if (b == 0 and s > 0) else 1
                p[f"{pre}.conv1.w"] = kaiming_uniform(rng, (mid, cin, 1, 1))
                p[f"{pre}.conv2.w"] = kaiming_uniform(rng, (mid, mid, 3, 3))
                p[f"{pre}.conv3.w"] = kaiming_uniform(rng, (width, mid, 1, 1))
                if config.norm:
                    for i, c in ((1, mid), (2, mid), (3, width)):
                        p[f"{pre}.norm{i}.g"] = np.ones(c)
                        p[f"{pre}.norm{i}.b"] = np.zeros(c)
                if stride != 1 or cin != width:
                    p[f"{pre}.down.w"] = kaiming_uniform(rng, (width, cin, 1, 1))
                    if config.norm:
                        p[f"{pre}.down.norm.g"] = np.ones(width)
                        p[f"{pre}.down.norm.b"] = np.zeros(width)
                cin = width
        p["head.w"] = trunc_normal(rng, (config.feature_width, config.classes))
        p["head.b"] = np.zeros(config.classes)
        self.params = {k: Tensor(v, dtype=dtype, requires_grad=True) for k, v in p.items()}

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        if not self.config.norm:
            return x
        return instance_norm2d(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def bottleneck_forward(self, x: Tensor, stage: int, block: int, stride: int) -> Tensor:
        """1x1 reduce -> 3x3 (stride) -> 1x1 expand, plus shortcut, relu after add."""
        pre = f"s{stage}.b{block}"
        y = relu(self._norm(conv2d(x, self.params[f"{pre}.conv1.w"]), f"{pre}.norm1"))
        y = relu(self._norm(conv2d(y, self.params[f"{pre}.conv2.w"], stride=stride, pad=1),
                            f"{pre}.norm2"))
        y = self._norm(conv2d(y, self.params[f"{pre}.conv3.w"]), f"{pre}.norm3")
        if not self.config.residual:
            return relu(y)
        if f"{pre}.down.w" in self.params:
            sc = self._norm(conv2d(x, self.params[f"{pre}.down.w"], stride=stride),
                            f"{pre}.down.norm")
        else:
            sc = x
        if sc.shape != y.shape:
            raise ConfigError(
                f"residual add mismatch at {pre}: {sc.shape} vs {y.shape}"
            )
        return relu(add(y, sc))

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """[B,3,H,W] -> (logits [B,K], features [B, final width])."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"resnet forward: expected [B,3,H,W], got {images.shape}")
        x = conv2d(images, self.params["stem.conv.w"], stride=2, pad=3)
        x = relu(self._norm(x, "stem.norm"))
        x = maxpool2d(x, 3, 2, 1)
        for s, blocks in enumerate(self.config.stage_blocks):
            for b in range(blocks):
                stride = 2 if (b == 0 and s > 0) else 1
                x = self.bottleneck_forward(x, s, b, stride)
        feats = mean(x, axis=(2, 3))
        logits = add(matmul(feats, self.params["head.w"]), self.params["head.b"])
        return logits, feats

    def forward_single(self, img: Tensor) -> tuple[Tensor, Tensor]:
        from .tensor import reshape

        logits, feats = self.forward(reshape(img, (1,) + tuple(img.shape)))
        return logits[0], feats[0]


def parameter_count(config: ResNetConfig) -> int:
    """Analytic parameter count for a config (weights the model will own)."""
    total = config.stem_width * 3 * 49
    if config.norm:
        total += 2 * config.stem_width
    cin = config.stem_width
    for s, (blocks, width) in enumerate(zip(config.stage_blocks, config.stage_widths)):
        mid = width // config.bottleneck
        for b in range(blocks):
            stride = 2 if (b == 0 and s > 0) else 1
            total += mid * cin + mid * mid * 9 + width * mid
            if config.norm:
                total += 2 * (mid + mid + width)
            if stride != 1 or cin != width:
                total += width * cin
                if config.norm:
                    total += 2 * width
            cin = width
    total += config.feature_width * config.classes + config.classes
    return total
