"""Segment records, masked crops, query splits and a synthetic shapes dataset."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from .errors import ShapeError, ValidationError
from .mining import NegativeBank

log = logging.getLogger(__name__)

# Per-channel RGB mean of the dual-encoder's pretraining images.
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)

MaskRef = Union[str, dict]


@dataclass
class SegmentRecord:
    image: str
    mask: MaskRef
    label: str
    segment_id: int
    split: str = "train"
    prepared: bool = False

    def validate(self) -> None:
        if not isinstance(self.label, str) or not self.label.strip():
            raise ValidationError(f"segment {self.segment_id} of {self.image}: empty label")
        if self.split not in ("train", "test"):
            raise ValidationError(f"segment {self.segment_id}: unknown split {self.split!r}")
        if not isinstance(self.segment_id, int) or isinstance(self.segment_id, bool):
            raise ValidationError(f"segment_id must be an integer, got {self.segment_id!r}")


@dataclass
class SegmentCrop:
    pixels: np.ndarray          # (H, W, 3) in [0, 1]
    mask: np.ndarray            # (H, W) bool, mask resampled alongside the pixels
    fill_color: tuple
    source: Optional[SegmentRecord] = None
    empty_mask: bool = False


@dataclass
class QuerySet:
    train_queries: list
    test_queries: list
    base_test: list = field(default_factory=list)
    novel_test: list = field(default_factory=list)

    def counts(self) -> dict:
        return {"train_queries": len(self.train_queries), "test_queries": len(self.test_queries),
                "base": len(self.base_test), "novel": len(self.novel_test)}

    def report(self) -> dict:
        return {"counts": self.counts(), **{k: list(v) for k, v in asdict(self).items()}}


def _unique(items: Iterable[str]) -> list:
    if isinstance(items, (set, frozenset)):
        items = sorted(items)
    out = []
    for x in items:
        if x not in out:
            out.append(x)
    return out


def split_queries(train_labels: Iterable[str], test_labels: Iterable[str]) -> QuerySet:
    """Partition the test queries into base (seen in training) and novel."""
    train, test = _unique(train_labels), _unique(test_labels)
    if not train or not test:
        raise ValidationError("train and test label sets must be non-empty")
    seen = set(train)
    return QuerySet(train, test, [q for q in test if q in seen],
                    [q for q in test if q not in seen])


# -- masks and crops ---------------------------------------------------------

def encode_rle(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if sum(counts) != h * w:
        raise ValidationError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(ref: MaskRef) -> np.ndarray:
    if isinstance(ref, dict):
        return decode_rle(ref)
    with Image.open(ref) as im:
        return np.asarray(im.convert("L")) > 0


def write_rgb(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, "L").save(path)


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    if pixels.shape[0] == size and pixels.shape[1] == size:
        return pixels.copy()
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.copy()
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="nearest")[0, 0].numpy() > 0.5


def fill_background(image: np.ndarray, mask: np.ndarray, fill_color=CLIP_MEAN) -> np.ndarray:
    """Replace every pixel outside ``mask`` with ``fill_color``."""
    return np.where(mask[..., None], image, np.asarray(fill_color, dtype=image.dtype))


def mask_bbox(mask: np.ndarray, pad_fraction: float = 0.1) -> tuple[int, int, int, int]:
    """Tight ``(top, bottom, left, right)`` box around the mask, padded and clipped."""
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    top, bottom, left, right = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    ph = int(round(pad_fraction * (bottom - top)))
    pw = int(round(pad_fraction * (right - left)))
    h, w = mask.shape
    return (int(max(top - ph, 0)), int(min(bottom + ph, h)), int(max(left - pw, 0)),
            int(min(right + pw, w)))


def mask_and_fill(image: np.ndarray, mask: np.ndarray, fill_color=CLIP_MEAN,
                  size: Optional[int] = None, pad_fraction: float = 0.1,
                  source: Optional[SegmentRecord] = None) -> SegmentCrop:
    """Fill outside the mask, crop to its padded bounding box, then resize.

    Filling happens at native resolution so the crop is exact before any
    resampling. ``size=None`` skips the resize.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if mask.dtype != bool:
        raise ValidationError(f"mask must be boolean, got {mask.dtype}")
    fill = tuple(float(c) for c in fill_color)
    filled = fill_background(image, mask, fill)
    empty = not mask.any()
    if empty:
        where = f" (segment {source.segment_id} of {source.image})" if source else ""
        warnings.warn(f"empty mask{where}; crop is entirely fill", stacklevel=2)
        top, bottom, left, right = 0, mask.shape[0], 0, mask.shape[1]
    else:
        top, bottom, left, right = mask_bbox(mask, pad_fraction)
    pixels, crop_mask = filled[top:bottom, left:right], mask[top:bottom, left:right]
    if size is not None:
        pixels, crop_mask = resize_bilinear(pixels, size), resize_nearest(crop_mask, size)
    return SegmentCrop(pixels, crop_mask, fill, source, empty)


# -- manifests ---------------------------------------------------------------

def _resolve(ref: MaskRef, root: Path) -> MaskRef:
    if isinstance(ref, dict):
        return ref
    p = Path(ref)
    return str(p if p.is_absolute() else (root / p).resolve())


def load_manifest(path) -> list[SegmentRecord]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    root = path.parent.resolve()
    records: list[SegmentRecord] = []
    seen: set = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = SegmentRecord(image=_resolve(raw["image"], root),
                                    mask=_resolve(raw["mask"], root),
                                    label=raw["label"], segment_id=raw["segment_id"],
                                    split=raw.get("split", "train"),
                                    prepared=bool(raw.get("prepared", False)))
                rec.validate()
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            key = (rec.image, rec.segment_id)
            if key in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate segment_id {rec.segment_id} in {rec.image}")
            seen.add(key)
            records.append(rec)
    return records


def _relative(ref: MaskRef, root: Path) -> MaskRef:
    if isinstance(ref, dict):
        return ref
    try:
        return Path(ref).resolve().relative_to(root).as_posix()
    except ValueError:
        return str(ref)


def save_manifest(records: Sequence[SegmentRecord], path) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            row = {"image": _relative(r.image, root), "mask": _relative(r.mask, root),
                   "label": r.label, "segment_id": r.segment_id, "split": r.split}
            if r.prepared:
                row["prepared"] = True
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def crop_record(rec: SegmentRecord, fill_color=CLIP_MEAN, size: Optional[int] = None,
                pad_fraction: float = 0.1) -> SegmentCrop:
    """Load a record's image and mask and build its crop (prepared records pass through)."""
    for ref in (rec.image, rec.mask):
        if isinstance(ref, str) and not Path(ref).exists():
            raise FileNotFoundError(f"segment {rec.segment_id} ({rec.label}): missing {ref}")
    image, mask = read_rgb(rec.image), read_mask(rec.mask)
    if rec.prepared:
        pixels = image if size is None else resize_bilinear(image, size)
        m = mask if size is None else resize_nearest(mask, size)
        return SegmentCrop(pixels, m, tuple(fill_color), rec, not mask.any())
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"segment {rec.segment_id}: mask {mask.shape} vs image {image.shape}")
    return mask_and_fill(image, mask, fill_color, size, pad_fraction, rec)


@dataclass
class SegmentSet:
    """In-memory crops ``(N, S, S, 3)`` and their labels, ready for training."""

    images: torch.Tensor
    labels: list

    def __len__(self) -> int:
        return len(self.labels)


def load_segments(records: Sequence[SegmentRecord], size: int, fill_color=CLIP_MEAN,
                  pad_fraction: float = 0.1) -> SegmentSet:
    crops = [crop_record(r, fill_color, size, pad_fraction).pixels for r in records]
    images = torch.from_numpy(np.stack(crops).astype(np.float32)) if crops else \
        torch.zeros(0, size, size, 3)
    return SegmentSet(images, [r.label for r in records])


# -- synthetic dataset -------------------------------------------------------

SHAPES = ("square", "circle", "triangle", "diamond")
COLORS = {
    "red": (220, 40, 40), "green": (40, 170, 60), "blue": (40, 80, 220),
    "yellow": (230, 210, 40), "purple": (140, 50, 180), "orange": (240, 130, 30),
}
_NEAR_COLOR = {
    "red": ("crimson", "maroon", "scarlet"), "green": ("lime", "olive", "teal"),
    "blue": ("navy", "azure", "cyan"), "yellow": ("gold", "amber", "lemon"),
    "purple": ("violet", "magenta", "lavender"), "orange": ("tangerine", "peach", "coral"),
}
_NEAR_SHAPE = {
    "square": ("rectangle", "box"), "circle": ("oval", "ring"),
    "triangle": ("wedge", "pyramid"), "diamond": ("rhombus", "kite"),
}


def synthetic_negatives(color: str, shape: str) -> list[str]:
    c, s = _NEAR_COLOR[color], _NEAR_SHAPE[shape]
    return [f"{c[0]} {shape}", f"{c[1]} {shape}", f"{color} {s[0]}",
            f"{color} {s[1]}", f"{c[2]} {s[0]}"]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, r: float,
                fill) -> None:
    if shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    else:
        raise ValidationError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.8, size=(4, 4, 3))
    smooth = resize_bilinear(coarse, size)
    yy, xx = np.mgrid[0:size, 0:size]
    freq, phase = rng.uniform(0.2, 0.6), rng.uniform(0, 2 * np.pi)
    stripes = 0.08 * np.sin(freq * (xx + yy) + phase)[..., None]
    noise = rng.normal(0, 0.03, size=(size, size, 3))
    return np.clip(smooth + stripes + noise, 0, 1)


def render_segment(rng: np.random.Generator, size: int, color: str, shape: str
                   ) -> tuple[np.ndarray, np.ndarray]:
    """One image with a labelled shape plus an unlabelled distractor shape."""
    img = Image.fromarray(np.rint(_background(rng, size) * 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    d_color = list(COLORS)[rng.integers(len(COLORS))]
    d_shape = SHAPES[rng.integers(len(SHAPES))]
    r = rng.uniform(0.08, 0.14) * size
    _draw_shape(draw, d_shape, *rng.uniform(r, size - r, size=2), r, COLORS[d_color])
    r = rng.uniform(0.15, 0.3) * size
    cx, cy = rng.uniform(r, size - r, size=2)
    jitter = rng.integers(-15, 16, size=3)
    rgb = tuple(int(v) for v in np.clip(np.array(COLORS[color]) + jitter, 0, 255))
    _draw_shape(draw, shape, cx, cy, r, rgb)
    mask_img = Image.new("L", (size, size), 0)
    _draw_shape(ImageDraw.Draw(mask_img), shape, cx, cy, r, 255)
    return np.asarray(img), np.asarray(mask_img) > 0


def _pick_classes(rng: np.random.Generator, num_classes: int, n_novel: int):
    """Cycle shuffled colors and shapes so early (base) classes differ in color.

    Later classes reuse colors and shapes already present, so novel class
    names are built from words seen during training.
    """
    colors = [list(COLORS)[i] for i in rng.permutation(len(COLORS))]
    shapes = [SHAPES[i] for i in rng.permutation(len(SHAPES))]
    combos, seen = [], set()
    i = 0
    while len(combos) < num_classes:
        if i >= len(colors) * len(shapes) * 2:
            raise ValidationError(
                f"num_classes must be in [2, {len(colors) * len(shapes)}]")
        c, s = colors[i % len(colors)], shapes[(i + i // len(colors)) % len(shapes)]
        if (c, s) not in seen:
            seen.add((c, s))
            combos.append((c, s))
        i += 1
    return combos[: num_classes - n_novel], combos[num_classes - n_novel:]


def generate_synthetic(num_classes: int, per_class: int, image_size: int, seed: int,
                       out_dir, novel_fraction: float = 0.25, test_fraction: float = 0.3
                       ) -> tuple[list[SegmentRecord], NegativeBank]:
    """Render a (color, shape) segment dataset with train/test manifests and a bank.

    Base classes are split train/test by ``test_fraction``; novel classes
    appear only in the test manifest. Writes ``images/``, ``masks/``,
    ``train.jsonl``, ``test.jsonl``, ``negatives.json`` and ``split.json``.
    """
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    n_novel = int(round(num_classes * novel_fraction))
    if n_novel >= num_classes:
        raise ValidationError("novel_fraction leaves no base classes")
    rng = np.random.default_rng(seed)
    base, novel = _pick_classes(rng, num_classes, n_novel)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    n_test = int(round(per_class * test_fraction))
    records: list[SegmentRecord] = []
    idx = 0
    for color, shape in base + novel:
        label = f"{color} {shape}"
        is_novel = (color, shape) in novel
        for k in range(per_class):
            img, mask = render_segment(rng, image_size, color, shape)
            name = f"{idx:05d}.png"
            Image.fromarray(img, "RGB").save(out / "images" / name)
            write_mask(out / "masks" / name, mask)
            split = "test" if is_novel or k >= per_class - n_test else "train"
            records.append(SegmentRecord(str((out / "images" / name).resolve()),
                                         str((out / "masks" / name).resolve()),
                                         label, 0, split))
            idx += 1
    bank = NegativeBank({f"{c} {s}": synthetic_negatives(c, s) for c, s in base})
    save_manifest([r for r in records if r.split == "train"], out / "train.jsonl")
    save_manifest([r for r in records if r.split == "test"], out / "test.jsonl")
    bank.save(out / "negatives.json")
    qs = split_queries([f"{c} {s}" for c, s in base], [f"{c} {s}" for c, s in base + novel])
    (out / "split.json").write_text(json.dumps(qs.report(), indent=2) + "\n")
    log.info("synthetic dataset: %d base, %d novel classes, %d segments in %s",
             len(base), len(novel), len(records), out)
    return records, bank


def scannetpp_offices_split() -> dict:
    """Scene ids, image counts and query counts of the ScanNet++ Offices split."""
    text = resources.files("opendas").joinpath("resources/scannetpp_offices.json").read_text(
        encoding="utf-8")
    return json.loads(text)
