"""Episodic data: fold logic, samplers, synthetic shapes, disk layout.

An episode is the unit of meta-training and testing: K labeled support
pairs, one query pair, and (at train time) M unlabeled images, all showing
the same class.  Folds partition dataset classes into disjoint train/test
groups so test classes are never seen during training.

The synthetic-shapes dataset draws one colored shape (square, triangle,
cross, circle) per image on a cluttered background, with exact masks and
per-class appearance variation.  It exists so the whole pipeline can be
trained and verified on a laptop-scale CPU budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigurationError, DataError, SamplingError

FOLD_FILE_VERSION = 1

SYNTHETIC_CLASSES = {1: "square", 2: "triangle", 3: "cross", 4: "circle"}
# fold index -> held-out test class name
_SYNTHETIC_FOLD_TABLE = {0: "circle", 1: "square", 2: "triangle", 3: "cross"}
_SYNTHETIC_HUES = {"square": 0.00, "triangle": 0.33, "cross": 0.66, "circle": 0.15}

PASCAL_NUM_CLASSES = 20
COCO_NUM_CLASSES = 80

_EPISODE_STREAM = 7


# ---- core records -----------------------------------------------------------


@dataclass
class SamplePair:
    """One image with the binary mask of a single class."""

    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    class_id: int
    sample_id: str = ""

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(f"mask shape {self.mask.shape} != image {self.image.shape[:2]}")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise DataError(f"mask values must be binary, got {vals}")


@dataclass
class Episode:
    """One meta-task: K supports, one query, M unlabeled images of one class."""

    support: list  # list[SamplePair]
    query: SamplePair
    unlabeled: list  # list[np.ndarray] images only, masks are not retained
    class_id: int
    seed: int
    support_ids: list = field(default_factory=list)
    query_id: str = ""
    unlabeled_ids: list = field(default_factory=list)

    @property
    def k_shots(self) -> int:
        return len(self.support)


@dataclass(frozen=True)
class FoldSpec:
    """Class-disjoint train/test partition for one fold."""

    dataset_name: str
    fold_index: int
    train_classes: frozenset
    test_classes: frozenset

    def __post_init__(self):
        if self.train_classes & self.test_classes:
            raise ConfigurationError(
                f"fold {self.fold_index}: train/test classes overlap: "
                f"{sorted(self.train_classes & self.test_classes)}"
            )
        if not self.train_classes or not self.test_classes:
            raise ConfigurationError(f"fold {self.fold_index}: empty class set")

    def classes_for(self, phase: str) -> frozenset:
        if phase == "train":
            return self.train_classes
        if phase == "test":
            return self.test_classes
        raise ConfigurationError(f"unknown phase {phase!r}")


def class_inventory(dataset_name: str) -> set:
    if dataset_name == "pascal5i":
        return set(range(1, PASCAL_NUM_CLASSES + 1))
    if dataset_name == "coco20i":
        return set(range(1, COCO_NUM_CLASSES + 1))
    if dataset_name == "synthetic":
        return set(SYNTHETIC_CLASSES)
    raise ConfigurationError(f"unknown dataset {dataset_name!r}")


def num_folds(dataset_name: str) -> int:
    class_inventory(dataset_name)
    return 4


def make_folds(dataset_name: str, fold_index: int) -> FoldSpec:
    """Standard fold layouts: 5 consecutive test classes per fold (pascal5i),
    interleaved stride-4 test classes (coco20i), one held-out shape (synthetic).
    """
    inventory = class_inventory(dataset_name)
    if not 0 <= fold_index < num_folds(dataset_name):
        raise ConfigurationError(
            f"fold index {fold_index} out of range for {dataset_name}"
        )
    if dataset_name == "pascal5i":
        test = {5 * fold_index + i for i in range(1, 6)}
    elif dataset_name == "coco20i":
        test = {4 * k + fold_index + 1 for k in range(20)}
    else:
        name = _SYNTHETIC_FOLD_TABLE[fold_index]
        test = {cid for cid, n in SYNTHETIC_CLASSES.items() if n == name}
    return FoldSpec(dataset_name, fold_index, frozenset(inventory - test), frozenset(test))


# ---- dataset container ------------------------------------------------------


class SegmentationDataset:
    """In-memory image/mask collection with a per-class usability index.

    ``masks`` hold class indices (0 = background); an image is usable for a
    class when that class covers at least ``min_foreground`` pixels.
    """

    def __init__(self, name, images, masks, sample_ids, class_names,
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), min_foreground=1):
        self.name = name
        self.images = images
        self.masks = masks
        self.sample_ids = list(sample_ids)
        self.class_names = dict(class_names)
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)
        self.min_foreground = min_foreground
        self.class_to_indices = self._build_index()

    def _build_index(self):
        index = {cid: [] for cid in self.class_names}
        for i, mask in enumerate(self.masks):
            present, counts = np.unique(mask, return_counts=True)
            for cid, count in zip(present, counts):
                if cid != 0 and count >= self.min_foreground and int(cid) in index:
                    index[int(cid)].append(i)
        return index

    def __len__(self):
        return len(self.images)

    def pair(self, index: int, class_id: int) -> SamplePair:
        binary = (self.masks[index] == class_id).astype(np.uint8)
        return SamplePair(self.images[index], binary, class_id, self.sample_ids[index])

    def usable_classes(self, classes, need: int):
        return sorted(c for c in classes if len(self.class_to_indices.get(c, ())) >= need)


# ---- episodic sampler -------------------------------------------------------


def sample_episode(dataset: SegmentationDataset, fold: FoldSpec, phase: str,
                   k_shots: int, m_unlabeled: int, rng_seed: int,
                   class_agnostic_unlabeled: bool = False) -> Episode:
    """Draw one class-homogeneous episode, deterministic in ``rng_seed``.

    Support and query come from the phase's class pool.  Unlabeled images are
    re-sampled from the *training* pool (never a held-out extra dataset) and
    are drawn after the labeled members, so the labeled part of an episode is
    identical across different M for the same seed.
    """
    rng = np.random.default_rng([int(rng_seed), _EPISODE_STREAM])
    pool = fold.classes_for(phase)
    usable = dataset.usable_classes(pool, need=k_shots + 1)
    if not usable:
        raise SamplingError(
            f"no class in the {phase} pool has {k_shots + 1} usable images"
        )
    class_id = int(usable[rng.integers(len(usable))])
    members = dataset.class_to_indices[class_id]
    picked = rng.choice(len(members), size=k_shots + 1, replace=False)
    picked = [members[i] for i in picked]
    support = [dataset.pair(i, class_id) for i in picked[:k_shots]]
    query = dataset.pair(picked[-1], class_id)

    unlabeled, unlabeled_ids = [], []
    if m_unlabeled > 0:
        if class_agnostic_unlabeled:
            u_pool = sorted({i for c in fold.train_classes
                             for i in dataset.class_to_indices.get(c, ())})
        else:
            u_pool = members
        # avoid reusing this episode's labeled images when the pool allows it
        fresh = [i for i in u_pool if i not in picked]
        u_pool = fresh if len(fresh) >= m_unlabeled else u_pool
        if not u_pool:
            raise SamplingError(f"class {class_id} has no unlabeled pool")
        idx = rng.choice(len(u_pool), size=m_unlabeled,
                         replace=len(u_pool) < m_unlabeled)
        for i in idx:
            unlabeled.append(dataset.images[u_pool[i]])
            unlabeled_ids.append(dataset.sample_ids[u_pool[i]])

    return Episode(
        support=support, query=query, unlabeled=unlabeled, class_id=class_id,
        seed=int(rng_seed),
        support_ids=[p.sample_id for p in support],
        query_id=query.sample_id, unlabeled_ids=unlabeled_ids,
    )


# ---- synthetic shapes -------------------------------------------------------


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB on arrays or scalars, all in [0, 1]."""
    h = np.asarray(h, dtype=np.float32) % 1.0
    s = np.asarray(s, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    i = np.floor(h * 6).astype(np.int64) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    r = np.select([i == k for k in range(6)], [c[0] for c in choices])
    g = np.select([i == k for k in range(6)], [c[1] for c in choices])
    b = np.select([i == k for k in range(6)], [c[2] for c in choices])
    return np.stack(np.broadcast_arrays(r, g, b), axis=-1).astype(np.float32)


def _smooth_noise(size: int, cells: int, rng) -> np.ndarray:
    """Low-frequency noise in [-1, 1] via bilinear-upsampled random grid."""
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR)
    arr = np.asarray(img)
    peak = max(np.abs(arr).max(), 1e-6)
    return arr / peak


def _rotate(points, center, theta):
    c, s = math.cos(theta), math.sin(theta)
    return [(center[0] + c * (x - center[0]) - s * (y - center[1]),
             center[1] + s * (x - center[0]) + c * (y - center[1]))
            for x, y in points]


def _draw_shape_mask(kind: str, size: int, rng) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    r = size * rng.uniform(0.14, 0.30)
    cx = rng.uniform(r * 0.8, size - r * 0.8)
    cy = rng.uniform(r * 0.8, size - r * 0.8)
    theta = rng.uniform(0, 2 * math.pi)
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=1)
    elif kind == "square":
        pts = [(cx - r, cy - r), (cx + r, cy - r), (cx + r, cy + r), (cx - r, cy + r)]
        draw.polygon(_rotate(pts, (cx, cy), theta), fill=1)
    elif kind == "triangle":
        pts = [(cx + r * math.cos(theta + k * 2 * math.pi / 3),
                cy + r * math.sin(theta + k * 2 * math.pi / 3)) for k in range(3)]
        draw.polygon(pts, fill=1)
    elif kind == "cross":
        w = r * rng.uniform(0.38, 0.55)
        bar1 = [(cx - r, cy - w), (cx + r, cy - w), (cx + r, cy + w), (cx - r, cy + w)]
        bar2 = [(cx - w, cy - r), (cx + w, cy - r), (cx + w, cy + r), (cx - w, cy + r)]
        draw.polygon(_rotate(bar1, (cx, cy), theta), fill=1)
        draw.polygon(_rotate(bar2, (cx, cy), theta), fill=1)
    else:
        raise ConfigurationError(f"unknown synthetic class {kind!r}")
    return np.asarray(canvas, dtype=np.uint8)


def _background(size: int, rng) -> np.ndarray:
    base = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.18), rng.uniform(0.3, 0.75))
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += 0.10 * _smooth_noise(size, 8, rng)[..., None]
    # muted distractor blobs: clutter without the saturated foreground palette
    canvas = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(2, 6)):
        bx, by = rng.uniform(0, size, 2)
        bw, bh = rng.uniform(size * 0.05, size * 0.25, 2)
        color = tuple(int(v * 255) for v in
                      _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.25),
                                  rng.uniform(0.25, 0.8)))
        box = [bx - bw, by - bh, bx + bw, by + bh]
        if rng.random() < 0.5:
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    img = np.asarray(canvas, dtype=np.float32) / 255.0
    img += 0.04 * rng.standard_normal((size, size, 3)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _foreground_fill(kind: str, size: int, rng) -> np.ndarray:
    # wide in-class appearance spread: the support/query pair of an episode
    # rarely shares an exact color, which is what makes 1-shot transfer hard
    hue = _SYNTHETIC_HUES[kind] + rng.uniform(-0.07, 0.07)
    sat = rng.uniform(0.55, 0.95)
    val = rng.uniform(0.6, 1.0)
    fill = np.broadcast_to(_hsv_to_rgb(hue, sat, val), (size, size, 3)).copy()
    fill += 0.06 * _smooth_noise(size, 6, rng)[..., None]
    return np.clip(fill, 0.0, 1.0)


def _global_nuisance(image: np.ndarray, rng) -> np.ndarray:
    """Whole-image photometric variation (tint, brightness, contrast).

    Applied after compositing, so instances of one class differ in overall
    appearance, not just in the sampled fill color; robustness to this is
    what consistency training buys."""
    tint = rng.uniform(0.85, 1.15, size=3).astype(np.float32)
    brightness = np.float32(rng.uniform(0.8, 1.2))
    contrast = np.float32(rng.uniform(0.8, 1.2))
    out = image * tint * brightness
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


def synthetic_sample(kind: str, size: int, rng,
                     fg_band=(0.02, 0.6), max_tries=64) -> tuple[np.ndarray, np.ndarray]:
    """One image/mask pair; rejection-samples until the foreground ratio
    lands in ``fg_band``."""
    for _ in range(max_tries):
        mask = _draw_shape_mask(kind, size, rng)
        ratio = mask.mean()
        if fg_band[0] <= ratio <= fg_band[1]:
            break
    else:
        raise DataError(f"could not draw {kind} within foreground band {fg_band}")
    bg = _background(size, rng)
    fg = _foreground_fill(kind, size, rng)
    m = mask[..., None].astype(np.float32)
    image = _global_nuisance(bg * (1 - m) + fg * m, rng)
    return image.astype(np.float32), mask


def synthetic_dataset(n_images: int, image_size: int, rng_seed: int) -> SegmentationDataset:
    """Balanced procedural dataset over the four shape classes."""
    if n_images < 20:
        raise ConfigurationError("synthetic dataset needs n_images >= 20")
    if image_size < 32:
        raise ConfigurationError("synthetic dataset needs image_size >= 32")
    kinds = sorted(SYNTHETIC_CLASSES.items())
    images, masks, ids = [], [], []
    for i in range(n_images):
        class_id, kind = kinds[i % len(kinds)]
        rng = np.random.default_rng([int(rng_seed), i])
        image, binary = synthetic_sample(kind, image_size, rng)
        images.append(image)
        masks.append((binary * class_id).astype(np.uint8))
        ids.append(f"syn_{i:05d}")
    return SegmentationDataset("synthetic", images, masks, ids, SYNTHETIC_CLASSES)


# ---- disk layout ------------------------------------------------------------


def materialize_dataset(dataset: SegmentationDataset, out_dir: str | Path) -> Path:
    """Write the on-disk layout: images/, masks/, classlist.txt, folds.txt."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for i, sid in enumerate(dataset.sample_ids):
        img = Image.fromarray((dataset.images[i] * 255).astype(np.uint8))
        img.save(out / "images" / f"{sid}.png")
        Image.fromarray(dataset.masks[i], mode="L").save(out / "masks" / f"{sid}.png")
    lines = [f"{cid} {name}" for cid, name in sorted(dataset.class_names.items())]
    (out / "classlist.txt").write_text("\n".join(lines) + "\n")
    write_fold_file(dataset.name, out / "folds.txt")
    return out


def write_fold_file(dataset_name: str, path: str | Path):
    lines = [f"version {FOLD_FILE_VERSION}"]
    for i in range(num_folds(dataset_name)):
        spec = make_folds(dataset_name, i)
        lines.append(f"{i}: test=" + ",".join(str(c) for c in sorted(spec.test_classes)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_fold_file(path: str | Path) -> dict:
    """Parse a fold-spec file into {fold_index: test class set}."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("version"):
        raise DataError(f"{path}: missing version header")
    version = int(lines[0].split()[1])
    if version != FOLD_FILE_VERSION:
        raise DataError(f"{path}: unsupported fold file version {version}")
    folds = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        idx, rest = line.split(":", 1)
        test = {int(c) for c in rest.strip().removeprefix("test=").split(",")}
        folds[int(idx)] = test
    return folds


def load_disk_dataset(root: str | Path, image_size: int,
                      name: str = "disk") -> SegmentationDataset:
    """Load the documented layout; resizes to a square (nearest for masks)."""
    root = Path(root)
    classlist = root / "classlist.txt"
    if not classlist.exists():
        raise DataError(f"{root}: classlist.txt not found")
    class_names = {}
    for line in classlist.read_text().splitlines():
        if line.strip():
            cid, cname = line.split(maxsplit=1)
            class_names[int(cid)] = cname.strip()
    image_dir, mask_dir = root / "images", root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: images/ and masks/ directories required")
    images, masks, ids = [], [], []
    for img_path in sorted(image_dir.iterdir()):
        if img_path.suffix.lower() not in (".jpg", ".jpeg", ".png"):
            continue
        sid = img_path.stem
        mask_path = mask_dir / f"{sid}.png"
        if not mask_path.exists():
            raise DataError(f"missing mask for image {sid}")
        img = Image.open(img_path).convert("RGB").resize(
            (image_size, image_size), Image.BILINEAR)
        mask = Image.open(mask_path).convert("L").resize(
            (image_size, image_size), Image.NEAREST)
        images.append(np.asarray(img, dtype=np.float32) / 255.0)
        masks.append(np.asarray(mask, dtype=np.uint8))
        ids.append(sid)
    if not images:
        raise DataError(f"{root}: no images found")
    return SegmentationDataset(name, images, masks, ids, class_names)


def build_dataset(cfg) -> SegmentationDataset:
    """Dataset registry keyed by config."""
    if cfg.dataset == "synthetic":
        if cfg.data_root:
            return load_disk_dataset(cfg.data_root, cfg.image_size, name="synthetic")
        return synthetic_dataset(cfg.synthetic_images, cfg.image_size, cfg.seed)
    if not cfg.data_root:
        raise DataError(f"dataset {cfg.dataset!r} requires dataset.root")
    return load_disk_dataset(cfg.data_root, cfg.image_size, name=cfg.dataset)


# ---- tensor assembly ----------------------------------------------------------

import torch  # noqa: E402  (tensor assembly only; the sampler itself is numpy)

from .augment import (  # noqa: E402
    GeometryRecord, augment, identity_policy, strong_policy, weak_policy,
)
from .errors import DegenerateMaskError  # noqa: E402

MIN_AUGMENTED_FOREGROUND = 16
_AUG_RETRIES = 8


def derive_seed(*parts) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def image_tensor(image: np.ndarray, dataset: SegmentationDataset,
                 dtype=torch.float32) -> torch.Tensor:
    """HWC [0,1] -> normalized CHW tensor using the dataset statistics."""
    arr = (np.asarray(image, dtype=np.float32) - dataset.mean) / dataset.std
    return torch.from_numpy(arr).permute(2, 0, 1).to(dtype)


def mask_tensor(mask: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(mask)).to(dtype)


@dataclass
class UnlabeledViews:
    """Weak/strong tensor pair for one unlabeled image plus their geometry."""

    weak_image: torch.Tensor
    strong_image: torch.Tensor
    weak_record: GeometryRecord
    strong_record: GeometryRecord


@dataclass
class EpisodeTensors:
    """Model-ready episode: normalized image tensors and float masks."""

    support_images: list
    support_masks: list
    query_image: torch.Tensor
    query_mask: torch.Tensor
    unlabeled: list  # list[UnlabeledViews]
    class_id: int


def _augment_pair(pair: SamplePair, seed: int, train: bool):
    """Weak-augment image+mask, retrying until enough foreground survives."""
    if not train:
        return pair.image, pair.mask
    for attempt in range(_AUG_RETRIES):
        img, mask, _ = augment(pair.image, weak_policy(),
                               derive_seed(seed, attempt), mask=pair.mask)
        if int(mask.sum()) >= MIN_AUGMENTED_FOREGROUND:
            return img, mask
    if int(pair.mask.sum()) >= MIN_AUGMENTED_FOREGROUND:
        return pair.image, pair.mask
    raise DegenerateMaskError(
        f"sample {pair.sample_id}: cannot keep {MIN_AUGMENTED_FOREGROUND} "
        "foreground pixels through augmentation")


def episode_tensors(episode: Episode, dataset: SegmentationDataset, train: bool,
                    seed: int, dtype=torch.float32) -> EpisodeTensors:
    """Augment (train only) and normalize an episode into tensors.

    Unlabeled images get a weak and a strong view sharing one geometric seed,
    so their records coincide and predictions compare in a common frame.
    """
    support_images, support_masks = [], []
    for i, pair in enumerate(episode.support):
        img, mask = _augment_pair(pair, derive_seed(seed, 1, i), train)
        support_images.append(image_tensor(img, dataset, dtype))
        support_masks.append(mask_tensor(mask, dtype))
    q_img, q_mask = _augment_pair(episode.query, derive_seed(seed, 2), train)

    unlabeled = []
    if train:
        for j, image in enumerate(episode.unlabeled):
            view_seed = derive_seed(seed, 3, j)
            weak_img, _, weak_rec = augment(image, weak_policy(), view_seed)
            strong_img, _, strong_rec = augment(image, strong_policy(), view_seed)
            unlabeled.append(UnlabeledViews(
                weak_image=image_tensor(weak_img, dataset, dtype),
                strong_image=image_tensor(strong_img, dataset, dtype),
                weak_record=weak_rec, strong_record=strong_rec,
            ))

    return EpisodeTensors(
        support_images=support_images,
        support_masks=support_masks,
        query_image=image_tensor(q_img, dataset, dtype),
        query_mask=mask_tensor(q_mask, dtype),
        unlabeled=unlabeled,
        class_id=episode.class_id,
    )
