"""Image containers, PPM I/O, manifests, augmentation, and splitting.

All randomness is derived from ``(seed, family, variant)`` tuples so the
pipeline is a pure function of its inputs; augmented files are
materialized to disk so dataset accounting stays exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError
from .tensor import Tensor

MANIFEST_SCHEMA_VERSION = 1

# augmentation families; 2 + 2 + 2 + 4 + 4 = 14 variants per image
FLIPS = ("horizontal", "vertical")
ROTATIONS = (90, 180)
SCALE_FACTORS = (1.15, 1.3)
CROP_COUNT = 4
CROP_FRACTION_RANGE = (0.7, 0.9)
TRANSLATE_DIRECTIONS = ("left", "right", "up", "down")
TRANSLATE_FRACTION = 0.1

_FAMILY_IDS = {"flip": 1, "rotate": 2, "scale": 3, "crop": 4, "translate": 5}


@dataclass
class AugmentPlan:
    flips: tuple[str, ...] = FLIPS
    rotations: tuple[int, ...] = ROTATIONS
    scale_factors: tuple[float, ...] = SCALE_FACTORS
    crop_count: int = CROP_COUNT
    crop_fraction_range: tuple[float, float] = CROP_FRACTION_RANGE
    translate_directions: tuple[str, ...] = TRANSLATE_DIRECTIONS
    translate_fraction: float = TRANSLATE_FRACTION

    def variants(self) -> list[tuple[str, int]]:
        out = [("flip", i) for i in range(len(self.flips))]
        out += [("rotate", i) for i in range(len(self.rotations))]
        out += [("scale", i) for i in range(len(self.scale_factors))]
        out += [("crop", i) for i in range(self.crop_count)]
        out += [("translate", i) for i in range(len(self.translate_directions))]
        return out


@dataclass
class LabeledImage:
    """RGB pixel grid with class label and provenance."""

    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width, 3)
    label: int
    defect_free: bool
    source_tag: str = ""

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise InputError(
                f"pixel buffer shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width} RGB"
            )
        if (self.label == 0) != self.defect_free:
            raise InputError(
                f"label {self.label} inconsistent with defect_free={self.defect_free}"
            )


@dataclass
class ManifestEntry:
    path: str
    label: int
    defect_free: bool
    split: str = "none"  # none | train | test
    origin: str = "original"  # original | augmented:<family>:<index>

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "label": self.label,
            "defect_free": self.defect_free,
            "split": self.split,
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        return cls(
            path=obj["path"],
            label=int(obj["label"]),
            defect_free=bool(obj["defect_free"]),
            split=obj.get("split", "none"),
            origin=obj.get("origin", "original"),
        )


@dataclass
class Manifest:
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise InputError(f"duplicate manifest paths: {dupes[:3]}")
        for e in self.entries:
            if e.split not in ("none", "train", "test"):
                raise InputError(f"bad split tag {e.split!r} for {e.path}")

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return counts

    def subset(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "entries": [e.to_json() for e in self.entries],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        obj = json.loads(Path(path).read_text())
        if obj.get("version") != MANIFEST_SCHEMA_VERSION:
            raise FormatError(f"unsupported manifest version {obj.get('version')!r}")
        return cls(
            seed=int(obj["seed"]),
            entries=[ManifestEntry.from_json(e) for e in obj["entries"]],
            version=obj["version"],
        )


# ---------------------------------------------------------------------------
# PPM (P6) I/O


def write_ppm(img: LabeledImage | np.ndarray, path) -> None:
    pixels = img.pixels if isinstance(img, LabeledImage) else np.asarray(img, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise InputError(f"write_ppm: expected RGB pixels, got {pixels.shape}")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file (maxval 255) into a uint8 (H, W, 3) array."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {data[:2]!r})", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":  # comment to end of line
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise FormatError(f"{path}: truncated header", offset=pos)
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: bad header token {token!r}", offset=start)
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    expected = 3 * w * h
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}",
            offset=pos + len(payload),
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def read_labeled(path, entry: ManifestEntry) -> LabeledImage:
    pixels = read_ppm(path)
    h, w, _ = pixels.shape
    return LabeledImage(
        width=w, height=h, pixels=pixels,
        label=entry.label, defect_free=entry.defect_free, source_tag=entry.origin,
    )


# ---------------------------------------------------------------------------
# resizing


def _resize_array(pixels: np.ndarray, tw: int, th: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center (corner-aligned-off) sampling."""
    h, w = pixels.shape[:2]
    sx = w / tw
    sy = h / th
    xs = (np.arange(tw, dtype=np.float64) + 0.5) * sx - 0.5
    ys = (np.arange(th, dtype=np.float64) + 0.5) * sy - 0.5
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)

    src = pixels.astype(np.float64)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.rint(out).clip(0, 255).astype(np.uint8)


def resize_bilinear(img: LabeledImage, target: tuple[int, int] = (224, 224)) -> LabeledImage:
    tw, th = target
    if img.width < 2 or img.height < 2:
        raise InputError(f"resize: degenerate source {img.width}x{img.height}")
    if (img.width, img.height) == (tw, th):
        pixels = img.pixels.copy()
    else:
        pixels = _resize_array(img.pixels, tw, th)
    return replace(img, width=tw, height=th, pixels=pixels)


# ---------------------------------------------------------------------------
# augmentation


def _variant_rng(seed: int, family: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _FAMILY_IDS[family], index)))


def _center_crop(pixels: np.ndarray, w: int, h: int) -> np.ndarray:
    ph, pw = pixels.shape[:2]
    y0 = (ph - h) // 2
    x0 = (pw - w) // 2
    return pixels[y0:y0 + h, x0:x0 + w]


def _apply_variant(img: LabeledImage, plan: AugmentPlan, family: str, index: int,
                   seed: int) -> np.ndarray:
    px = img.pixels
    w, h = img.width, img.height
    if family == "flip":
        return px[:, ::-1] if plan.flips[index] == "horizontal" else px[::-1, :]
    if family == "rotate":
        deg = plan.rotations[index]
        rotated = np.rot90(px, k=deg // 90)
        if rotated.shape[:2] != (h, w):  # quarter turns swap extents; restore them
            rotated = _resize_array(np.ascontiguousarray(rotated), w, h)
        return np.ascontiguousarray(rotated)
    if family == "scale":
        f = plan.scale_factors[index]
        big = _resize_array(px, max(w + 1, round(w * f)), max(h + 1, round(h * f)))
        return _center_crop(big, w, h)
    if family == "crop":
        rng = _variant_rng(seed, family, index)
        lo, hi = plan.crop_fraction_range
        f = rng.uniform(lo, hi)
        cw = max(2, round(w * f))
        ch = max(2, round(h * f))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        return _resize_array(np.ascontiguousarray(px[y0:y0 + ch, x0:x0 + cw]), w, h)
    if family == "translate":
        dx = dy = 0
        shift_x = max(1, round(w * plan.translate_fraction))
        shift_y = max(1, round(h * plan.translate_fraction))
        direction = plan.translate_directions[index]
        if direction == "left":
            dx = -shift_x
        elif direction == "right":
            dx = shift_x
        elif direction == "up":
            dy = -shift_y
        else:
            dy = shift_y
        out = np.zeros_like(px)
        src_y = slice(max(0, -dy), min(h, h - dy))
        src_x = slice(max(0, -dx), min(w, w - dx))
        dst_y = slice(max(0, dy), min(h, h + dy))
        dst_x = slice(max(0, dx), min(w, w + dx))
        out[dst_y, dst_x] = px[src_y, src_x]
        return out
    raise ConfigError(f"unknown augmentation family {family!r}")


def augment_all(img: LabeledImage, plan: AugmentPlan | None = None,
                seed: int = 0) -> list[LabeledImage]:
    """Emit the full variant set (14 by default) at the source image's size."""
    plan = plan or AugmentPlan()
    out = []
    for family, index in plan.variants():
        pixels = _apply_variant(img, plan, family, index, seed)
        out.append(replace(
            img,
            pixels=pixels,
            source_tag=f"augmented:{family}:{index}",
        ))
    return out


def augment_manifest(manifest: Manifest, base_dir, plan: AugmentPlan | None = None,
                     only_defect: bool = True) -> tuple[Manifest, int]:
    """Materialize variants next to their sources; returns (manifest, added)."""
    plan = plan or AugmentPlan()
    base = Path(base_dir)
    sources = [e for e in manifest.entries
               if e.origin == "original" and (not only_defect or not e.defect_free)]
    missing = [e.path for e in sources if not (base / e.path).exists()]
    if missing:
        raise FileNotFoundError("missing image files: " + ", ".join(missing))
    new_entries = list(manifest.entries)
    added = 0
    for i, entry in enumerate(sources):
        img = read_labeled(base / entry.path, entry)
        stem = Path(entry.path).stem
        parent = Path(entry.path).parent
        for var in augment_all(img, plan, seed=_entry_seed(manifest.seed, i)):
            family, index = var.source_tag.split(":")[1:]
            rel = str(parent / f"{stem}_aug_{family}{index}.ppm")
            write_ppm(var, base / rel)
            new_entries.append(ManifestEntry(
                path=rel, label=entry.label, defect_free=entry.defect_free,
                split="none", origin=var.source_tag,
            ))
            added += 1
    return Manifest(seed=manifest.seed, entries=new_entries), added


def _entry_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, 6, index)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# splitting


def balance_and_split(manifest: Manifest, train_fraction: float = 0.8,
                      seed: int | None = None, force: bool = False) -> Manifest:
    """Stratified per-class split; floor(fraction * n) of each class to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if seed is None:
        seed = manifest.seed
    if not force and any(e.split != "none" for e in manifest.entries):
        raise ConfigError("manifest already split; pass force=True to re-split")

    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        by_class.setdefault(e.label, []).append(i)
    for label, idxs in sorted(by_class.items()):
        if len(idxs) < 2:
            raise InputError(f"class {label} has {len(idxs)} entry(ies); need >= 2 to split")

    entries = [replace(e) for e in manifest.entries]
    for label, idxs in sorted(by_class.items()):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 7, label)))
        order = rng.permutation(len(idxs))
        n_train = int(np.floor(train_fraction * len(idxs)))
        for rank, j in enumerate(order):
            entries[idxs[j]].split = "train" if rank < n_train else "test"
    return Manifest(seed=manifest.seed, entries=entries)


# ---------------------------------------------------------------------------
# tensor bridge


def to_tensor(img: LabeledImage, dtype: str = "f32") -> Tensor:
    """Channel-first [3, 224, 224] tensor scaled to [0, 1] as value / 255."""
    if (img.width, img.height) != (224, 224):
        raise InputError(f"to_tensor: expected 224x224 image, got {img.width}x{img.height}")
    arr = img.pixels.astype(np.float32 if dtype == "f32" else np.float64)
    return Tensor(arr.transpose(2, 0, 1) / arr.dtype.type(255.0), dtype=dtype)


def from_tensor(t: Tensor) -> np.ndarray:
    """Inverse of :func:`to_tensor` up to 1/255 quantization."""
    arr = np.rint(t.data.transpose(1, 2, 0) * 255.0).clip(0, 255)
    return arr.astype(np.uint8)
