"""Decision-level fusion training: averaged multi-branch loss, Adam with
cosine learning-rate decay, evaluation, checkpointing, and the
five-arm ablation harness.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError
from .pipeline import Manifest, read_ppm, _resize_array
from .resnet import ResNetBranch, ResNetConfig
from .tensor import Tape, Tensor, NumericsError, UsageError, cross_entropy
from .vit import ChannelSpec, ViTBranch, ViTConfig

ARM_ORDER = ("resnet", "vit", "vit-conv", "vit-2ch", "ih-vit")
ARM_DISPLAY = {
    "resnet": "ResNet50",
    "vit": "ViT",
    "vit-conv": "ViT+Conv",
    "vit-2ch": "2channel-ViT",
    "ih-vit": "IH-ViT",
}
# published accuracies shown as a non-asserted reference column
REFERENCE_ACC = {
    "ResNet50": 69.71,
    "ViT": 66.45,
    "ViT+Conv": 69.18,
    "2channel-ViT": 67.83,
    "IH-ViT": 72.51,
}


@dataclass
class FusionWeights:
    a_resnet: float = 1.0
    a_vit: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.a_resnet) and math.isfinite(self.a_vit)):
            raise ConfigError("fusion weights must be finite")
        if self.a_resnet <= 0 or self.a_vit <= 0:
            raise ConfigError("fusion weights must be > 0")


@dataclass
class TrainConfig:
    lr0: float = 0.001
    lr_min: float = 0.0
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 8
    class_weighting: bool = False
    seed: int = 0
    eval_batch_size: int = 16
    target_accuracy: float | None = None  # optional early stop once reached
    min_epochs: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.lr0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")


# ---------------------------------------------------------------------------
# loss and fusion


def combined_loss(losses, weights=None) -> Tensor:
    """|sum(w_i * L_i)| / n with gradient flowing to every branch.

    The forward value is accumulated exactly (f64 fsum) and cast to the
    working dtype, so e.g. losses (0.6, 0.8) with unit weights give 0.7.
    """
    losses = list(losses)
    if not losses:
        raise UsageError("combined_loss: need at least one branch loss")
    if weights is None:
        weights = [1.0] * len(losses)
    weights = [float(w) for w in weights]
    if len(weights) != len(losses):
        raise UsageError(
            f"combined_loss: {len(losses)} losses but {len(weights)} weights"
        )
    for l in losses:
        if l.size != 1:
            raise UsageError(f"combined_loss: branch loss must be scalar, got {l.shape}")
    n = len(losses)
    s = math.fsum(w * l.item() for w, l in zip(weights, losses))
    sign = 1.0 if s > 0 else (-1.0 if s < 0 else 0.0)
    dtype = losses[0].data.dtype
    out = np.asarray(abs(s) / n, dtype=dtype)

    def bwd(g):
        return tuple(
            np.asarray(g * dtype.type(sign * w / n), dtype=dtype) for w in weights
        )

    return T._apply("combined_loss", out, tuple(losses), bwd)


def decision_fuse(probs_resnet, probs_vit, weights: FusionWeights | None = None):
    """Weighted average of branch probability vectors; argmax prediction.

    Accepts [K] vectors or [B, K] batches; ties break toward the lowest
    class id.  Inputs must already be softmax outputs.
    """
    weights = weights or FusionWeights()
    p_r = np.asarray(probs_resnet, dtype=np.float64)
    p_v = np.asarray(probs_vit, dtype=np.float64)
    if p_r.shape != p_v.shape:
        raise InputError(f"decision_fuse: shape mismatch {p_r.shape} vs {p_v.shape}")
    for name, p in (("resnet", p_r), ("vit", p_v)):
        sums = p.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6 or p.min() < -1e-9:
            raise InputError(f"decision_fuse: {name} input is not a probability vector")
    fused = (weights.a_resnet * p_r + weights.a_vit * p_v) / (weights.a_resnet + weights.a_vit)
    pred = np.argmax(fused, axis=-1)
    if fused.ndim == 1:
        return fused, int(pred)
    return fused, pred


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2, clamped past total."""
    if step < 0:
        raise UsageError(f"cosine_lr: negative step {step}")
    if total_steps < 1:
        raise UsageError(f"cosine_lr: total_steps must be >= 1, got {total_steps}")
    if step > total_steps:
        return lr_min
    # at step == total_steps, cos(pi) == -1.0 exactly and the formula hits lr_min
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place Adam update with bias correction; L2 term added to grads."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m_state = state.setdefault("m", {})
    v_state = state.setdefault("v", {})
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise UsageError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}"
            )
        if weight_decay:
            g = g + p.dtype.type(weight_decay) * p
        m = m_state.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = v_state[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_state[name] = m
        v_state[name] = v
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    """Stateful wrapper around :func:`adam_step` bound to arm parameters."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state: dict = {}

    def step(self, lr: float) -> None:
        raw = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adam_step(raw, grads, self.state, lr,
                  self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay)
        for t in self.params.values():
            t.grad = None


# ---------------------------------------------------------------------------
# arms


@dataclass
class Arm:
    name: str
    resnet: ResNetBranch | None
    vit: ViTBranch | None
    fusion: FusionWeights = field(default_factory=FusionWeights)

    @property
    def display_name(self) -> str:
        return ARM_DISPLAY[self.name]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.resnet is not None:
            out.update({f"resnet.{k}": v for k, v in self.resnet.params.items()})
        if self.vit is not None:
            out.update({f"vit.{k}": v for k, v in self.vit.params.items()})
        return out

    def branch_logits(self, images: Tensor) -> dict[str, Tensor]:
        out = {}
        if self.resnet is not None:
            out["resnet"], _ = self.resnet.forward(images)
        if self.vit is not None:
            out["vit"], _ = self.vit.forward(images)
        return out

    def branch_weights(self) -> list[float]:
        out = []
        if self.resnet is not None:
            out.append(self.fusion.a_resnet)
        if self.vit is not None:
            out.append(self.fusion.a_vit)
        return out

    def predict_probs(self, images: Tensor) -> np.ndarray:
        """Fused (or single-branch) class probabilities, [B, K]."""
        logits = self.branch_logits(images)
        probs = {k: _softmax_np(v.data) for k, v in logits.items()}
        if len(probs) == 2:
            fused, _ = decision_fuse(probs["resnet"], probs["vit"], self.fusion)
            return fused
        return next(iter(probs.values()))

    def config_dict(self) -> dict:
        return {
            "arm": self.name,
            "resnet": asdict(self.resnet.config) if self.resnet else None,
            "vit": asdict(self.vit.config) if self.vit else None,
            "fusion": asdict(self.fusion),
        }


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _arm_vit_config(name: str, base: ViTConfig) -> ViTConfig:
    if name in ("resnet",):
        raise ConfigError(f"arm {name!r} has no ViT branch")
    if name == "vit":
        channels = (ChannelSpec(16, "linear"),)
    elif name == "vit-conv":
        channels = (ChannelSpec(16, "convblock"),)
    elif name == "vit-2ch":
        channels = (ChannelSpec(16, "linear"), ChannelSpec(32, "linear"))
    else:  # ih-vit keeps the configured dual conv channels
        channels = base.channels
    return replace(base, channels=channels)


def build_arm(name: str, vit_cfg: ViTConfig, resnet_cfg: ResNetConfig,
              fusion: FusionWeights | None = None, seed: int = 0,
              dtype: str = "f32") -> Arm:
    if name not in ARM_ORDER:
        raise ConfigError(f"unknown arm {name!r}; expected one of {ARM_ORDER}")
    fusion = fusion or FusionWeights()
    resnet = vit = None
    if name in ("resnet", "ih-vit"):
        resnet = ResNetBranch(resnet_cfg, seed=seed, dtype=dtype)
    if name != "resnet":
        vit = ViTBranch(_arm_vit_config(name, vit_cfg), seed=seed, dtype=dtype)
    return Arm(name=name, resnet=resnet, vit=vit, fusion=fusion)


def arm_from_checkpoint(path) -> Arm:
    raw, config = load_checkpoint(path)
    name = config.get("arm")
    if name not in ARM_ORDER:
        raise ConfigError(f"checkpoint has unknown arm {name!r}")
    vit_cfg = _vit_config_from_dict(config["vit"]) if config.get("vit") else ViTConfig()
    resnet_cfg = ResNetConfig(**config["resnet"]) if config.get("resnet") else ResNetConfig.desk()
    fusion = FusionWeights(**config.get("fusion", {}))
    arm = build_arm(name, vit_cfg, resnet_cfg, fusion=fusion, seed=0)
    params = arm.parameters()
    if set(raw) != set(params):
        missing = sorted(set(params) ^ set(raw))
        raise ConfigError(f"checkpoint parameters do not match arm layout: {missing[:4]}")
    for k, t in params.items():
        if tuple(raw[k].shape) != t.shape:
            raise ConfigError(f"checkpoint tensor {k!r} has shape {raw[k].shape}, expected {t.shape}")
        t.data = raw[k]
    return arm


def _vit_config_from_dict(obj: dict) -> ViTConfig:
    obj = dict(obj)
    obj["channels"] = tuple(ChannelSpec(**c) for c in obj.get("channels", ()))
    return ViTConfig(**obj)


def save_arm(arm: Arm, path) -> None:
    save_checkpoint(arm.parameters(), arm.config_dict(), path)


# ---------------------------------------------------------------------------
# data access


def load_split(manifest: Manifest, base_dir, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Images (N,224,224,3 u8, resized as needed) and labels for one split."""
    entries = manifest.subset(split)
    if not entries:
        raise InputError(f"manifest has no {split!r} entries")
    imgs = np.empty((len(entries), 224, 224, 3), dtype=np.uint8)
    labels = np.empty(len(entries), dtype=np.int64)
    base = Path(base_dir)
    for i, e in enumerate(entries):
        px = read_ppm(base / e.path)
        if px.shape[:2] != (224, 224):
            px = _resize_array(px, 224, 224)
        imgs[i] = px
        labels[i] = e.label
    return imgs, labels


def _batch_tensor(imgs: np.ndarray, dtype: str = "f32") -> Tensor:
    arr = imgs.astype(np.float32 if dtype == "f32" else np.float64)
    return Tensor(arr.transpose(0, 3, 1, 2) / arr.dtype.type(255.0), dtype=dtype)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    arm: str
    accuracy: float
    confusion: list[list[int]]
    loss_curve: list[float]
    acc_curve: list[float]
    seed: int
    config_hash: str
    epochs_run: int
    steps_run: int = 0
    wall_seconds: float = 0.0
    rows: list[dict] | None = None

    def to_json(self) -> dict:
        out = {
            "arm": self.arm,
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "loss_curve": self.loss_curve,
            "acc_curve": self.acc_curve,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "epochs_run": self.epochs_run,
            "steps_run": self.steps_run,
            "wall_seconds": self.wall_seconds,
        }
        if self.rows is not None:
            out["rows"] = self.rows
        return out

    def identity_json(self) -> str:
        """Serialization used for determinism comparisons (no wall clock)."""
        out = self.to_json()
        out.pop("wall_seconds")
        return json.dumps(out, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    def loss_csv(self) -> str:
        lines = ["epoch,loss,test_accuracy"]
        for i, (l, a) in enumerate(zip(self.loss_curve, self.acc_curve)):
            lines.append(f"{i},{l!r},{a!r}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        if self.rows is not None:
            return format_table(
                ["network", "accuracy", "reference"],
                [[r["name"],
                  "error" if "error" in r else f"{100 * r['accuracy']:.2f}%",
                  f"{r['reference_acc']:.2f}%"] for r in self.rows],
            )
        k = len(self.confusion)
        head = ["true\\pred"] + [str(j) for j in range(k)]
        body = [[str(i)] + [str(v) for v in row] for i, row in enumerate(self.confusion)]
        return (f"arm: {self.arm}  accuracy: {100 * self.accuracy:.2f}%  "
                f"epochs: {self.epochs_run}\n" + format_table(head, body))


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    def fmt(row):
        return "  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(r) for r in rows])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# train / evaluate / ablate


def evaluate(arm: Arm, imgs: np.ndarray, labels: np.ndarray,
             batch_size: int = 16, classes: int | None = None) -> tuple[float, np.ndarray]:
    """Accuracy and K x K confusion matrix (rows = true class)."""
    if len(imgs) == 0:
        raise InputError("evaluate: empty test set")
    if classes is None:
        classes = (arm.resnet or arm.vit).config.classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for i in range(0, len(imgs), batch_size):
        x = _batch_tensor(imgs[i:i + batch_size])
        probs = arm.predict_probs(x)
        preds = np.argmax(probs, axis=-1)
        for t, p in zip(labels[i:i + batch_size], preds):
            confusion[t, p] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    return accuracy, confusion


def evaluate_manifest(arm: Arm, manifest: Manifest, base_dir,
                      batch_size: int = 16) -> tuple[float, np.ndarray]:
    imgs, labels = load_split(manifest, base_dir, "test")
    return evaluate(arm, imgs, labels, batch_size=batch_size)


def _class_weights(labels: np.ndarray, classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=classes).astype(np.float64)
    counts[counts == 0] = 1.0
    w = len(labels) / (classes * counts)
    return w


def train(arm: Arm, manifest: Manifest, base_dir, cfg: TrainConfig,
          log=None) -> MetricsReport:
    """Epoch loop: shuffle, batch forward on the active branches, combined
    loss, backward, Adam step under cosine decay; per-epoch test evaluation."""
    train_x, train_y = load_split(manifest, base_dir, "train")
    test_x, test_y = load_split(manifest, base_dir, "test")
    classes = (arm.resnet or arm.vit).config.classes

    params = arm.parameters()
    adam = Adam(params, cfg)
    n = len(train_x)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    weights = arm.branch_weights()
    cw = _class_weights(train_y, classes) if cfg.class_weighting else None

    loss_curve: list[float] = []
    acc_curve: list[float] = []
    confusion = None
    start = time.monotonic()
    step = 0
    epochs_run = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 12, epoch)))
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x = _batch_tensor(train_x[idx])
            y = train_y[idx]
            try:
                with Tape() as tape:
                    logits = arm.branch_logits(x)
                    losses = [cross_entropy(l, y, class_weights=cw)
                              for l in logits.values()]
                    loss = combined_loss(losses, weights)
                tape.backward(loss)
            except NumericsError as e:
                raise NumericsError(f"epoch {epoch} step {b}: {e}") from None
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            adam.step(lr)
            epoch_losses.append(loss.item())
            step += 1
        acc, confusion = evaluate(arm, test_x, test_y,
                                  batch_size=cfg.eval_batch_size, classes=classes)
        loss_curve.append(float(np.mean(epoch_losses)))
        acc_curve.append(acc)
        epochs_run = epoch + 1
        if log:
            log(f"epoch {epoch}: loss {loss_curve[-1]:.4f}  test acc {100 * acc:.2f}%")
        if (cfg.target_accuracy is not None and acc >= cfg.target_accuracy
                and epochs_run >= cfg.min_epochs):
            break

    return MetricsReport(
        arm=arm.name,
        accuracy=acc_curve[-1],
        confusion=confusion.tolist(),
        loss_curve=loss_curve,
        acc_curve=acc_curve,
        seed=cfg.seed,
        config_hash=config_hash({"train": asdict(cfg), "model": arm.config_dict()}),
        epochs_run=epochs_run,
        steps_run=step,
        wall_seconds=time.monotonic() - start,
    )


def ablate(manifest: Manifest, base_dir, vit_cfg: ViTConfig, resnet_cfg: ResNetConfig,
           cfg: TrainConfig, fusion: FusionWeights | None = None,
           log=None) -> MetricsReport:
    """Train and evaluate all five arms under identical seed and config."""
    rows = []
    for name in ARM_ORDER:
        display = ARM_DISPLAY[name]
        try:
            arm = build_arm(name, vit_cfg, resnet_cfg, fusion=fusion, seed=cfg.seed)
            report = train(arm, manifest, base_dir, cfg, log=log)
            rows.append({
                "name": display,
                "accuracy": report.accuracy,
                "reference_acc": REFERENCE_ACC[display],
                "epochs_run": report.epochs_run,
            })
            if log:
                log(f"{display}: {100 * report.accuracy:.2f}%")
        except Exception as e:  # one arm's failure must not kill the others
            rows.append({
                "name": display,
                "error": f"{type(e).__name__}: {e}",
                "reference_acc": REFERENCE_ACC[display],
            })
            if log:
                log(f"{display}: failed ({e})")
    return MetricsReport(
        arm="ablation",
        accuracy=max((r["accuracy"] for r in rows if "accuracy" in r), default=0.0),
        confusion=[],
        loss_curve=[],
        acc_curve=[],
        seed=cfg.seed,
        config_hash=config_hash({
            "train": asdict(cfg),
            "vit": asdict(vit_cfg),
            "resnet": asdict(resnet_cfg),
        }),
        epochs_run=cfg.epochs,
        rows=rows,
    )
