"""Synthetic speckled targets whose only class cue is a small glyph.

Every target is the same bright rectangle ("chassis") rotated by a random
aspect angle.  A class-specific 5×5 glyph sits at a random offset on the
chassis; all glyphs have the same number of lit cells, so class-agnostic
statistics of the chassis do not carry label information.  Gaussian
clutter blobs are scattered over the background and the clean scene is
multiplied by unit-mean exponential speckle before clipping to [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AugmentationError, DataError
from .ops import resize_array

_T = [
    # block
    ["00000", "01110", "01110", "01110", "00000"],
    # plus
    ["00100", "00100", "11111", "00100", "00100"],
    # lattice of dots
    ["10101", "00000", "10101", "00000", "10101"],
    # diamond ring with centre
    ["00100", "01010", "10101", "01010", "00100"],
    # L
    ["10000", "10000", "10000", "10000", "11111"],
    # T
    ["11111", "00100", "00100", "00100", "00100"],
    # H
    ["00000", "10001", "11111", "10001", "00000"],
]
GLYPHS = np.array([[[c == "1" for c in row] for row in g] for g in _T], dtype=bool)
GLYPH_NAMES = ("block", "plus", "lattice", "diamond", "ell", "tee", "aitch")

SPLITS = {"train": 0, "test": 1}
CANVAS_RATIO = 384 / 224


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 5
    image_size: tuple[int, int] = (64, 64)
    chassis_size: tuple[float, float] = (28.0, 14.0)
    chassis_intensity: float = 0.35
    background: float = 0.06
    glyph_cell: float = 2.0
    glyph_intensity: float = 0.9
    glyph_offset: float = 7.0
    clutter_count: int = 6
    clutter_intensity: tuple[float, float] = (0.3, 0.7)
    clutter_sigma: tuple[float, float] = (1.5, 3.0)
    speckle: bool = True
    rotation: bool = True
    supersample: int = 2
    seed: int = 0

    def validate(self) -> None:
        if not 2 <= self.num_classes <= len(GLYPHS):
            raise DataError(f"num_classes must lie in [2, {len(GLYPHS)}], got {self.num_classes}")
        if min(self.image_size) < 8:
            raise DataError(f"image_size too small: {self.image_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        for key in ("image_size", "chassis_size", "clutter_intensity", "clutter_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    glyph_mask: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Stacked samples.  ``boxes`` holds chassis bounding boxes (y0, x0, y1, x1), end-exclusive."""

    images: np.ndarray  # n×H×W float32 in [0, 1]
    labels: np.ndarray  # n int64
    glyph_masks: np.ndarray  # n×H×W uint8
    boxes: np.ndarray  # n×4 int64
    seeds: np.ndarray  # n int64
    rotations: np.ndarray  # n float64, degrees
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            image=self.images[i],
            label=int(self.labels[i]),
            glyph_mask=self.glyph_masks[i],
            meta={"seed": int(self.seeds[i]), "rotation": float(self.rotations[i]),
                  "chassis_box": [int(v) for v in self.boxes[i]]},
        )

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], self.glyph_masks[index],
                       self.boxes[index], self.seeds[index], self.rotations[index],
                       self.num_classes, self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def sample_seed(spec: SyntheticSpec, split: str, label: int, index: int) -> int:
    ss = np.random.SeedSequence([spec.seed, SPLITS[split], label, index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def apply_speckle(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative unit-mean exponential speckle (single-look intensity)."""
    return clean * rng.exponential(1.0, size=clean.shape)


def _target_frame(spec: SyntheticSpec, theta: float, factor: int):
    """Pixel-centre coordinates rotated into the target frame (along, across)."""
    H, W = spec.image_size
    ys = (np.arange(H * factor) + 0.5) / factor - H / 2
    xs = (np.arange(W * factor) + 0.5) / factor - W / 2
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    along = c * xx + s * yy
    across = -s * xx + c * yy
    return along, across


def _pool(a: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return a
    h, w = a.shape
    return a.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def render(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    """Draw one clean scene; returns (clean, glyph_mask, box, rotation_degrees)."""
    H, W = spec.image_size
    f = max(1, int(spec.supersample))
    deg = float(rng.uniform(0.0, 360.0)) if spec.rotation else 0.0
    theta = math.radians(deg)
    L, Wd = spec.chassis_size
    g_half = 2.5 * spec.glyph_cell

    for _ in range(50):
        ga = float(rng.uniform(-spec.glyph_offset, spec.glyph_offset))
        gb = float(rng.uniform(-1.0, 1.0))
        along, across = _target_frame(spec, theta, 1)
        glyph_mask = (np.abs(along - ga) < g_half) & (np.abs(across - gb) < g_half)
        rows, cols = np.nonzero(glyph_mask)
        inside_chassis = abs(ga) + g_half <= L / 2 and abs(gb) + g_half <= Wd / 2
        if rows.size and inside_chassis and rows.min() > 0 and cols.min() > 0 \
                and rows.max() < H - 1 and cols.max() < W - 1:
            break
    else:
        raise DataError("could not place glyph inside the image after 50 attempts")

    along, across = _target_frame(spec, theta, f)
    chassis = (np.abs(along) <= L / 2) & (np.abs(across) <= Wd / 2)
    scene = np.full(along.shape, spec.background)
    scene[chassis] = spec.chassis_intensity
    u = np.floor((along - ga + g_half) / spec.glyph_cell).astype(int)
    v = np.floor((across - gb + g_half) / spec.glyph_cell).astype(int)
    in_glyph = (u >= 0) & (u < 5) & (v >= 0) & (v < 5)
    lit = np.zeros_like(in_glyph)
    lit[in_glyph] = GLYPHS[label][v[in_glyph], u[in_glyph]]
    scene[lit] = spec.glyph_intensity
    clean = _pool(scene, f)

    rows, cols = np.nonzero(_pool(chassis.astype(float), f) > 0)
    box = np.array([rows.min(), cols.min(), rows.max() + 1, cols.max() + 1], dtype=np.int64)

    # clutter stays off the chassis so the glyph is never covered
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    keep_out = _pool(chassis.astype(float), f) > 0
    placed = 0
    for _ in range(spec.clutter_count * 20):
        if placed >= spec.clutter_count:
            break
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sigma = rng.uniform(*spec.clutter_sigma)
        amp = rng.uniform(*spec.clutter_intensity)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        if np.any(keep_out & (blob > 0.05 * amp)):
            continue
        clean = clean + blob
        placed += 1
    return clean, glyph_mask.astype(np.uint8), box, deg


def generate_sample(spec: SyntheticSpec, label: int, index: int, split: str = "train") -> Sample:
    seed = sample_seed(spec, split, label, index)
    rng = np.random.default_rng(seed)
    clean, glyph_mask, box, deg = render(spec, label, rng)
    img = apply_speckle(clean, rng) if spec.speckle else clean
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, label, glyph_mask, {"seed": seed, "rotation": deg, "chassis_box": box.tolist()})


def generate(spec: SyntheticSpec, n_per_class: int, split: str = "train") -> Dataset:
    """``n_per_class`` samples of every class, deterministic in ``spec.seed``.

    Each sample draws from its own stream keyed by (seed, split, class,
    index), so the train and test splits never share an instance.
    """
    spec.validate()
    if n_per_class < 1:
        raise DataError(f"n_per_class must be ≥ 1, got {n_per_class}")
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    samples = [generate_sample(spec, c, i, split) for c in range(spec.num_classes) for i in range(n_per_class)]
    return from_samples(samples, spec.num_classes, split)


def from_samples(samples: list[Sample], num_classes: int, split: str = "train") -> Dataset:
    return Dataset(
        images=np.stack([s.image for s in samples]).astype(np.float32),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        glyph_masks=np.stack([s.glyph_mask for s in samples]).astype(np.uint8),
        boxes=np.array([s.meta["chassis_box"] for s in samples], dtype=np.int64),
        seeds=np.array([s.meta["seed"] for s in samples], dtype=np.int64),
        rotations=np.array([s.meta["rotation"] for s in samples], dtype=np.float64),
        num_classes=num_classes,
        split=split,
    )


def kshot_sample(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Exactly ``k`` samples per class, drawn without replacement."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size < k:
            raise DataError(f"class {c} has {idx.size} samples, {k} requested")
        picks.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return dataset.subset(np.concatenate(picks))


# chip augmentation --------------------------------------------------------


def canvas_size(image_size: tuple[int, int]) -> tuple[int, int]:
    return tuple(math.ceil(n * CANVAS_RATIO) for n in image_size)


def _scale_box(box, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Map an end-exclusive pixel box through an align-corners resize."""
    sy = (dst[0] - 1) / (src[0] - 1) if src[0] > 1 else 1.0
    sx = (dst[1] - 1) / (src[1] - 1) if src[1] > 1 else 1.0
    y0, x0, y1, x1 = box
    return np.array([math.floor(y0 * sy), math.floor(x0 * sx),
                     math.ceil((y1 - 1) * sy) + 1, math.ceil((x1 - 1) * sx) + 1], dtype=np.int64)


def chip_offsets(box, canvas: tuple[int, int], chip: tuple[int, int], count: int,
                 rng: np.random.Generator) -> list[tuple[int, int]]:
    """Random top-left corners of chips that fully contain ``box``."""
    y0, x0, y1, x1 = (int(v) for v in box)
    ch, cw = chip
    lo_y, hi_y = max(0, y1 - ch), min(y0, canvas[0] - ch)
    lo_x, hi_x = max(0, x1 - cw), min(x0, canvas[1] - cw)
    if lo_y > hi_y or lo_x > hi_x:
        raise AugmentationError(f"chassis box {list(box)} does not fit a {chip} chip on a {canvas} canvas")
    return [(int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1))) for _ in range(count)]


def augment_chips(image: np.ndarray, chip: tuple[int, int], count: int = 10, *, chassis_box,
                  seed: int = 0, canvas: tuple[int, int] | None = None, glyph_mask=None):
    """Upsample to the padded canvas and cut ``count`` chips around the chassis.

    Returns ``(chips, masks, boxes)``; ``masks`` is empty when no glyph mask
    is given.  Boxes are the chassis box in each chip's coordinates.
    """
    image = np.asarray(image)
    canvas = tuple(canvas) if canvas is not None else canvas_size(image.shape)
    chip = tuple(chip)
    if chip[0] > canvas[0] or chip[1] > canvas[1]:
        raise AugmentationError(f"chip {chip} larger than canvas {canvas}")
    big = resize_array(image, canvas)
    cbox = _scale_box(chassis_box, image.shape, canvas)
    offsets = chip_offsets(cbox, canvas, chip, count, np.random.default_rng(seed))
    big_mask = resize_array(np.asarray(glyph_mask, dtype=np.float64), canvas) >= 0.5 if glyph_mask is not None else None
    chips, masks, boxes = [], [], []
    for oy, ox in offsets:
        chips.append(big[oy:oy + chip[0], ox:ox + chip[1]].astype(np.float32))
        if big_mask is not None:
            masks.append(big_mask[oy:oy + chip[0], ox:ox + chip[1]].astype(np.uint8))
        boxes.append(cbox - np.array([oy, ox, oy, ox]))
    return chips, masks, boxes


def augment_dataset(dataset: Dataset, count: int, seed: int) -> Dataset:
    """Replace every sample by ``count`` chips at the original image size."""
    size = dataset.images.shape[1:]
    images, masks, boxes, idx = [], [], [], []
    for i in range(len(dataset)):
        s = int(np.random.SeedSequence([seed, int(dataset.seeds[i])]).generate_state(1)[0])
        c, m, b = augment_chips(dataset.images[i], size, count, chassis_box=dataset.boxes[i],
                                seed=s, glyph_mask=dataset.glyph_masks[i])
        images += c
        masks += m
        boxes += b
        idx += [i] * count
    idx = np.array(idx)
    return Dataset(np.stack(images), dataset.labels[idx], np.stack(masks), np.stack(boxes),
                   dataset.seeds[idx], dataset.rotations[idx], dataset.num_classes, dataset.split)


def center_chips(dataset: Dataset) -> Dataset:
    """Centre chip of the padded canvas, matching the scale of augmented chips."""
    size = tuple(dataset.images.shape[1:])
    canvas = canvas_size(size)
    oy, ox = (canvas[0] - size[0]) // 2, (canvas[1] - size[1]) // 2
    images = np.stack([resize_array(im, canvas)[oy:oy + size[0], ox:ox + size[1]] for im in dataset.images])
    masks = np.stack([(resize_array(m.astype(np.float64), canvas) >= 0.5)[oy:oy + size[0], ox:ox + size[1]]
                      for m in dataset.glyph_masks])
    boxes = np.stack([_scale_box(b, size, canvas) - np.array([oy, ox, oy, ox]) for b in dataset.boxes])
    return Dataset(images.astype(np.float32), dataset.labels.copy(), masks.astype(np.uint8), boxes,
                   dataset.seeds.copy(), dataset.rotations.copy(), dataset.num_classes, dataset.split)


# on-disk layout -----------------------------------------------------------

MANIFEST = "manifest.json"


def _to_png(values: np.ndarray, path: Path) -> None:
    arr = np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(root, spec: SyntheticSpec, splits: dict[str, Dataset]) -> Path:
    """One directory per class with image and glyph-mask PNGs, plus a JSON manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, ds in splits.items():
        counters: dict[int, int] = {}
        for i in range(len(ds)):
            label = int(ds.labels[i])
            n = counters.get(label, 0)
            counters[label] = n + 1
            cls_dir = root / f"class_{label}"
            cls_dir.mkdir(exist_ok=True)
            stem = f"{split}_{n:04d}"
            _to_png(ds.images[i], cls_dir / f"{stem}.png")
            _to_png(ds.glyph_masks[i].astype(np.float64), cls_dir / f"{stem}_glyph.png")
            entries.append({
                "image": f"class_{label}/{stem}.png",
                "glyph_mask": f"class_{label}/{stem}_glyph.png",
                "label": label,
                "split": split,
                "seed": int(ds.seeds[i]),
                "rotation": round(float(ds.rotations[i]), 6),
                "chassis_box": [int(v) for v in ds.boxes[i]],
            })
    manifest = {
        "format": "scdr-synthetic/1",
        "num_classes": spec.num_classes,
        "image_size": list(spec.image_size),
        "spec": spec.to_dict(),
        "splits": {split: len(ds) for split, ds in splits.items()},
        "samples": entries,
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def load_dataset(root, split: str) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    entries = [e for e in manifest["samples"] if e["split"] == split]
    if not entries:
        raise DataError(f"dataset at {root} has no {split!r} samples")
    images, masks = [], []
    for e in entries:
        try:
            images.append(np.asarray(Image.open(root / e["image"]), dtype=np.float32) / 255.0)
            masks.append((np.asarray(Image.open(root / e["glyph_mask"])) >= 128).astype(np.uint8))
        except OSError as exc:
            raise DataError(f"cannot read sample files for {e['image']}: {exc}") from exc
    return Dataset(
        images=np.stack(images),
        labels=np.array([e["label"] for e in entries], dtype=np.int64),
        glyph_masks=np.stack(masks),
        boxes=np.array([e["chassis_box"] for e in entries], dtype=np.int64),
        seeds=np.array([e["seed"] for e in entries], dtype=np.int64),
        rotations=np.array([e["rotation"] for e in entries], dtype=np.float64),
        num_classes=int(manifest["num_classes"]),
        split=split,
    )
