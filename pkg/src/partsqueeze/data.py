"""Dataset ingestion: directory readers for the supported layouts, object
cropping, and the synthetic toy set.

Every reader yields samples whose image is the object crop resized to the
requested resolution, with landmarks and masks mapped into the crop frame.
Ordering is deterministic (annotation-file order); shuffling is the training
loop's job. Layouts are documented in the README.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError, InvalidInputError
from .evaluation import LandmarkSet

log = logging.getLogger(__name__)

DATASET_KINDS = ("celeba_wild", "aflw_unaligned", "cub_category", "voc_category", "toy")

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

TOY_TEST_FRACTION = 0.2


@dataclass
class Sample:
    """One training/eval item: a [3,S,S] image crop in [0,1] plus annotations."""

    image: torch.Tensor
    source_id: str
    landmarks: LandmarkSet | None = None
    mask: np.ndarray | None = None  # bool [S, S] object mask in crop frame
    bbox: tuple[float, float, float, float] | None = None  # crop box in source pixels
    error_norm: np.ndarray | None = None  # per-image error normalizer (scalar or per-axis)


@dataclass
class DatasetSpec:
    """What to load: layout kind, location, split, and filters."""

    kind: str
    root: str
    split: str = "train"
    category: str | None = None
    face_area_min: float = 0.3
    image_size: int = 128

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise InvalidInputError(f"unknown dataset kind {self.kind!r}; expected {DATASET_KINDS}")
        if not 0.0 <= self.face_area_min <= 1.0:
            raise InvalidInputError("face_area_min must be in [0,1]")


def crop_to_full(pts: np.ndarray, box: tuple[float, float, float, float]) -> np.ndarray:
    """Map normalized crop coordinates back to source-image pixels."""
    x0, y0, x1, y1 = box
    out = np.asarray(pts, dtype=np.float64).copy()
    out[..., 0] = out[..., 0] * (x1 - x0) + x0
    out[..., 1] = out[..., 1] * (y1 - y0) + y0
    return out


def full_to_crop(pts: np.ndarray, box: tuple[float, float, float, float]) -> np.ndarray:
    """Map source-image pixel coordinates into normalized crop coordinates."""
    x0, y0, x1, y1 = box
    out = np.asarray(pts, dtype=np.float64).copy()
    out[..., 0] = (out[..., 0] - x0) / (x1 - x0)
    out[..., 1] = (out[..., 1] - y0) / (y1 - y0)
    return out


def _load_image(path: Path) -> np.ndarray | None:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError):
        return None


def _crop_resize(img: np.ndarray, box, size: int) -> torch.Tensor:
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    h, w = img.shape[:2]
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    crop = Image.fromarray(img[y0:y1, x0:x1])
    crop = crop.resize((size, size), Image.BILINEAR)
    arr = np.asarray(crop, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DatasetError(f"missing {what}: {path}")
    return path


# --------------------------------------------------------------------------
# toy


def load_toy(spec: DatasetSpec) -> list[Sample]:
    root = Path(spec.root)
    manifest_path = _require(root / "manifest.json", "toy manifest")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    entries = manifest["samples"]
    # deterministic 80/20 split keyed on the generator seed
    rng = np.random.default_rng(manifest["seed"])
    order = rng.permutation(len(entries))
    n_test = int(round(TOY_TEST_FRACTION * len(entries)))
    test_idx = set(order[:n_test].tolist())
    wanted = [i for i in range(len(entries)) if (i in test_idx) == (spec.split == "test")]
    samples, skipped = [], 0
    for i in wanted:
        entry = entries[i]
        img = _load_image(root / entry["image"])
        if img is None:
            skipped += 1
            continue
        box = (0.0, 0.0, float(manifest["canvas"]), float(manifest["canvas"]))
        image = _crop_resize(img, box, spec.image_size)
        with Image.open(root / entry["mask"]) as mk:
            mask_lbl = np.asarray(
                mk.resize((spec.image_size, spec.image_size), Image.NEAREST)
            )
        pts = np.asarray(entry["landmarks"], dtype=np.float64)
        valid = (pts >= 0).all(axis=1)
        samples.append(
            Sample(
                image=image,
                source_id=entry["id"],
                landmarks=LandmarkSet(points=np.clip(pts, 0, 1), valid=valid),
                mask=mask_lbl > 0,
                bbox=tuple(float(v) for v in entry["bbox"]),
                error_norm=None,
            )
        )
    if skipped:
        log.warning("toy reader skipped %d unreadable images", skipped)
    return samples


# --------------------------------------------------------------------------
# CelebA (wild images)


def _read_celeba_table(path: Path) -> dict[str, list[float]]:
    lines = path.read_text().splitlines()
    rows = {}
    for line in lines[2:]:  # count line + header line
        fields = line.split()
        if not fields:
            continue
        rows[fields[0]] = [float(v) for v in fields[1:]]
    return rows


def load_celeba(spec: DatasetSpec) -> list[Sample]:
    root = Path(spec.root)
    img_dir = _require(root / "img_celeba", "CelebA image directory")
    bboxes = _read_celeba_table(_require(root / "list_bbox_celeba.txt", "CelebA bbox list"))
    lms = _read_celeba_table(
        _require(root / "list_landmarks_celeba.txt", "CelebA landmark list")
    )
    split_code = {"train": 0, "val": 1, "test": 2}[spec.split]
    partition = {}
    for line in _require(root / "list_eval_partition.txt", "CelebA partition list").read_text().splitlines():
        fields = line.split()
        if len(fields) == 2:
            partition[fields[0]] = int(fields[1])
    samples, skipped = [], 0
    for name in sorted(partition):
        if partition[name] != split_code:
            continue
        if name not in bboxes or name not in lms:
            raise DatasetError(f"CelebA annotations missing for {name}")
        img = _load_image(img_dir / name)
        if img is None:
            skipped += 1
            continue
        h, w = img.shape[:2]
        bx, by, bw, bh = bboxes[name]
        if bw * bh < spec.face_area_min * w * h:
            continue  # face covers too little of the frame
        box = (bx, by, bx + bw, by + bh)
        pts_px = np.asarray(lms[name], dtype=np.float64).reshape(5, 2)
        pts = full_to_crop(pts_px, box)
        interocular = float(np.linalg.norm(pts[1] - pts[0]))
        samples.append(
            Sample(
                image=_crop_resize(img, box, spec.image_size),
                source_id=name,
                landmarks=LandmarkSet(points=pts, valid=np.ones(5, dtype=bool)),
                bbox=box,
                error_norm=np.asarray(interocular),
            )
        )
    if skipped:
        log.warning("CelebA reader skipped %d unreadable images", skipped)
    return samples


# --------------------------------------------------------------------------
# AFLW (five-landmark unaligned subset, CSV manifest layout)


def load_aflw(spec: DatasetSpec) -> list[Sample]:
    root = Path(spec.root)
    ann = _require(root / f"annotations_{spec.split}.csv", "AFLW annotation csv")
    img_dir = _require(root / "images", "AFLW image directory")
    samples, skipped = [], 0
    with open(ann) as fh:
        for row in csv.DictReader(fh):
            img = _load_image(img_dir / row["filename"])
            if img is None:
                skipped += 1
                continue
            box = tuple(float(row[k]) for k in ("x0", "y0", "x1", "y1"))
            pts_px = np.asarray(
                [[float(row[f"lx{i}"]), float(row[f"ly{i}"])] for i in range(1, 6)]
            )
            pts = full_to_crop(pts_px, box)
            interocular = float(np.linalg.norm(pts[1] - pts[0]))
            samples.append(
                Sample(
                    image=_crop_resize(img, box, spec.image_size),
                    source_id=row["filename"],
                    landmarks=LandmarkSet(points=pts, valid=np.ones(5, dtype=bool)),
                    bbox=box,
                    error_norm=np.asarray(interocular),
                )
            )
    if skipped:
        log.warning("AFLW reader skipped %d unreadable images", skipped)
    return samples


# --------------------------------------------------------------------------
# CUB (first categories, 15 annotated part locations)


def _read_id_table(path: Path) -> dict[int, list[str]]:
    rows = {}
    for line in path.read_text().splitlines():
        fields = line.split()
        if fields:
            rows[int(fields[0])] = fields[1:]
    return rows


def load_cub(spec: DatasetSpec) -> list[Sample]:
    root = Path(spec.root)
    images = _read_id_table(_require(root / "images.txt", "CUB image list"))
    labels = _read_id_table(_require(root / "image_class_labels.txt", "CUB class labels"))
    splits = _read_id_table(_require(root / "train_test_split.txt", "CUB split list"))
    boxes = _read_id_table(_require(root / "bounding_boxes.txt", "CUB bounding boxes"))
    part_path = _require(root / "parts" / "part_locs.txt", "CUB part locations")
    parts: dict[int, dict[int, list[float]]] = {}
    for line in part_path.read_text().splitlines():
        fields = line.split()
        if len(fields) >= 5:
            img_id, part_id = int(fields[0]), int(fields[1])
            parts.setdefault(img_id, {})[part_id] = [float(v) for v in fields[2:5]]
    if spec.category is not None:
        wanted = {int(spec.category)}
    else:
        wanted = {1, 2, 3}
    want_train = 1 if spec.split == "train" else 0
    samples, skipped = [], 0
    for img_id in sorted(images):
        if int(labels[img_id][0]) not in wanted:
            continue
        if int(splits[img_id][0]) != want_train:
            continue
        img = _load_image(root / "images" / images[img_id][0])
        if img is None:
            skipped += 1
            continue
        bx, by, bw, bh = (float(v) for v in boxes[img_id])
        box = (bx, by, bx + bw, by + bh)
        locs = parts.get(img_id, {})
        pts_px = np.zeros((15, 2))
        valid = np.zeros(15, dtype=bool)
        for part_id in range(1, 16):
            if part_id in locs:
                x, y, vis = locs[part_id]
                pts_px[part_id - 1] = (x, y)
                valid[part_id - 1] = vis > 0
        pts = full_to_crop(pts_px, box)
        samples.append(
            Sample(
                image=_crop_resize(img, box, spec.image_size),
                source_id=images[img_id][0],
                landmarks=LandmarkSet(points=pts, valid=valid),
                bbox=box,
                # coordinates are normalized per-axis by the gt box already
                error_norm=None,
            )
        )
    if skipped:
        log.warning("CUB reader skipped %d unreadable images", skipped)
    return samples


# --------------------------------------------------------------------------
# PASCAL VOC (instance crops of one category)

VOC_CROP_PADDING = 0.10


def load_voc(spec: DatasetSpec) -> list[Sample]:
    root = Path(spec.root)
    if spec.category is None:
        raise DatasetError("voc_category requires a category name (e.g. 'sheep')")
    try:
        class_idx = VOC_CLASSES.index(spec.category) + 1
    except ValueError:
        raise DatasetError(f"unknown VOC category {spec.category!r}") from None
    split_file = _require(
        root / "ImageSets" / "Segmentation" / f"{spec.split}.txt", "VOC split list"
    )
    ids = [line.strip() for line in split_file.read_text().splitlines() if line.strip()]
    samples, skipped = [], 0
    for image_id in ids:
        obj_path = root / "SegmentationObject" / f"{image_id}.png"
        cls_path = root / "SegmentationClass" / f"{image_id}.png"
        if not obj_path.exists() or not cls_path.exists():
            raise DatasetError(f"missing VOC segmentation annotation for {image_id}")
        img = _load_image(root / "JPEGImages" / f"{image_id}.jpg")
        if img is None:
            skipped += 1
            continue
        with Image.open(obj_path) as f:
            obj = np.asarray(f)
        with Image.open(cls_path) as f:
            cls = np.asarray(f)
        for inst in np.unique(obj):
            if inst in (0, 255):
                continue
            inst_mask = obj == inst
            inst_classes = cls[inst_mask]
            inst_classes = inst_classes[inst_classes != 255]
            if inst_classes.size == 0 or np.bincount(inst_classes).argmax() != class_idx:
                continue
            vs, us = np.nonzero(inst_mask)
            bw, bh = us.max() - us.min() + 1, vs.max() - vs.min() + 1
            pad_x, pad_y = VOC_CROP_PADDING * bw, VOC_CROP_PADDING * bh
            box = (us.min() - pad_x, vs.min() - pad_y, us.max() + 1 + pad_x, vs.max() + 1 + pad_y)
            x0, y0, x1, y1 = (int(round(v)) for v in box)
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(obj.shape[1], x1), min(obj.shape[0], y1)
            mask_crop = Image.fromarray(inst_mask[y0:y1, x0:x1].astype(np.uint8) * 255)
            mask = (
                np.asarray(mask_crop.resize((spec.image_size, spec.image_size), Image.NEAREST))
                > 0
            )
            samples.append(
                Sample(
                    image=_crop_resize(img, (x0, y0, x1, y1), spec.image_size),
                    source_id=f"{image_id}_{int(inst)}",
                    mask=mask,
                    bbox=(float(x0), float(y0), float(x1), float(y1)),
                )
            )
    if skipped:
        log.warning("VOC reader skipped %d unreadable images", skipped)
    return samples


_LOADERS = {
    "toy": load_toy,
    "celeba_wild": load_celeba,
    "aflw_unaligned": load_aflw,
    "cub_category": load_cub,
    "voc_category": load_voc,
}


def load_dataset(spec: DatasetSpec) -> list[Sample]:
    """Load all samples for the spec in deterministic order."""
    if not Path(spec.root).exists():
        raise DatasetError(f"dataset root does not exist: {spec.root}")
    return _LOADERS[spec.kind](spec)
