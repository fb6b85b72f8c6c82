"""Dataset ingestion, preprocessing, augmentation, fold splitting and phantoms.

Two directory layouts are understood:

``busi``
    ``<root>/<category>/<stem>.png`` with masks ``<stem>_mask.png`` and
    optionally ``<stem>_mask_<i>.png`` (all masks of a stem are unioned).
``generic``
    ``<root>/images/<name>`` paired with ``<root>/masks/<name>``; an optional
    ``<root>/categories.json`` maps ids to category labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AugmentConfig
from .exceptions import ConfigError, DataError
from .validation import check_divisible

log = logging.getLogger(__name__)

AugmentationPolicy = AugmentConfig
BUSI_CATEGORIES = ("benign", "malignant", "normal")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_MASK_RE = re.compile(r"^(?P<stem>.+)_mask(?:_(?P<idx>\d+))?$")


@dataclass
class SampleRecord:
    id: str
    image_path: str
    mask_paths: list = field(default_factory=list)
    category: str = "tumor"
    fold: int | None = None

    @property
    def mask_count(self):
        return len(self.mask_paths)


def scan_dataset(root, layout="busi", issues: list | None = None) -> list[SampleRecord]:
    """List image/mask records under ``root`` sorted by id.

    Images of a non-normal category without any mask are skipped; a
    description of each is appended to ``issues`` when given.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    if layout == "busi":
        records, problems = _scan_busi(root)
    elif layout == "generic":
        records, problems = _scan_generic(root)
    else:
        raise ConfigError(f"unknown dataset layout {layout!r}")
    for p in problems:
        log.warning(p)
    if issues is not None:
        issues.extend(problems)
    if not records:
        log.warning("no samples found under %s (layout=%s)", root, layout)
    return sorted(records, key=lambda r: r.id)


def _scan_busi(root: Path):
    records, problems = [], []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        category = cat_dir.name.lower()
        images, masks = {}, {}
        for f in sorted(cat_dir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = _MASK_RE.match(f.stem)
            if m:
                masks.setdefault(m.group("stem"), []).append(f)
            else:
                images[f.stem] = f
        for stem, path in images.items():
            mask_paths = sorted(masks.get(stem, []), key=lambda p: (len(p.stem), p.stem))
            if not mask_paths and category != "normal":
                problems.append(f"missing mask for {path}")
                continue
            records.append(
                SampleRecord(f"{category}/{stem}", str(path), [str(p) for p in mask_paths], category)
            )
        for stem in sorted(set(masks) - set(images)):
            problems.append(f"mask without image: {cat_dir / stem}")
    return records, problems


def _scan_generic(root: Path):
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        return [], [f"generic layout expects {img_dir}"]
    categories = {}
    cat_file = root / "categories.json"
    if cat_file.exists():
        categories = json.loads(cat_file.read_text())
    records, problems = [], []
    for f in sorted(img_dir.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        mask = mask_dir / f.name
        category = categories.get(f.stem, "tumor")
        if not mask.exists():
            if category != "normal":
                problems.append(f"missing mask for {f}")
                continue
            mask_paths = []
        else:
            mask_paths = [str(mask)]
        records.append(SampleRecord(f.stem, str(f), mask_paths, category))
    return records, problems


def _open(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """``(H, W, 3)`` uint8 RGB."""
    return np.asarray(_open(path).convert("RGB"))


def load_mask(paths, shape=None) -> np.ndarray:
    """Union of the given mask files as ``(H, W)`` uint8 in {0, 1}."""
    out = None
    for p in paths:
        m = np.asarray(_open(p).convert("L")) > 127
        if out is None:
            out = m
        elif m.shape != out.shape:
            raise DataError(f"mask {p} has shape {m.shape}, expected {out.shape}")
        else:
            out = out | m
    if out is None:
        if shape is None:
            raise DataError("no mask files and no shape for an empty mask")
        out = np.zeros(shape, dtype=bool)
    return out.astype(np.uint8)


def resize_pair(image: np.ndarray, mask: np.ndarray, size) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear image / nearest mask resize to ``size=(H, W)``; mask re-binarized."""
    h, w = size
    img = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
    msk = np.asarray(Image.fromarray(mask.astype(np.uint8) * 255).resize((w, h), Image.NEAREST))
    return img, (msk >= 128).astype(np.uint8)


def load_resized(record: SampleRecord, size) -> tuple[np.ndarray, np.ndarray]:
    image = load_image(record.image_path)
    mask = load_mask(record.mask_paths, image.shape[:2])
    if mask.shape != image.shape[:2]:
        raise DataError(f"{record.id}: mask {mask.shape} does not match image {image.shape[:2]}")
    return resize_pair(image, mask, size)


def normalize(image_u8: np.ndarray, mean, std, eps=1e-6) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(3, H, W)`` float32 standardized per channel."""
    x = image_u8.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, np.float32)) / (np.asarray(std, np.float32) + eps)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def channel_stats(images) -> dict:
    """Per-channel mean/std (in [0, 1] intensity units) over uint8 ``(H, W, 3)`` images."""
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for img in images:
        x = img.reshape(-1, 3).astype(np.float64) / 255.0
        total += x.sum(0)
        total_sq += (x**2).sum(0)
        count += len(x)
    if count == 0:
        raise DataError("cannot compute normalization statistics from zero images")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    return {"mean": mean.tolist(), "std": std.tolist()}


def compute_normalization(records, size, cache_dir=None) -> dict:
    """Channel statistics over ``records`` resized to ``size``.

    Cached as JSON under ``cache_dir`` (default ``$PBNET_CACHE``) when set.
    """
    cache_dir = cache_dir or os.environ.get("PBNET_CACHE")
    key = hashlib.sha256(
        json.dumps([[r.id, r.image_path] for r in records] + [list(size)]).encode()
    ).hexdigest()[:16]
    cache_file = Path(cache_dir) / f"norm_{key}.json" if cache_dir else None
    if cache_file is not None and cache_file.exists():
        return json.loads(cache_file.read_text())
    stats = channel_stats(load_resized(r, size)[0] for r in records)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(stats))
    return stats


def preprocess(record: SampleRecord, target_size, normalization) -> tuple[torch.Tensor, torch.Tensor]:
    """Load, resize and standardize one record: ``(3, H, W)`` image, ``(1, H, W)`` mask."""
    check_divisible(*target_size, 32, "target size")
    img, mask = load_resized(record, target_size)
    x = normalize(img, normalization["mean"], normalization["std"])
    return torch.from_numpy(x), torch.from_numpy(mask.astype(np.float32))[None]


def augment(image: torch.Tensor, mask: torch.Tensor, policy: AugmentConfig, rng: np.random.Generator):
    """Random flip / rotation / scaling, identical for image and mask.

    Each transform fires independently with its probability. The same number
    of random values is drawn on every call so streams stay aligned.
    """
    u = rng.random(3)
    angle = rng.uniform(-policy.max_rotation, policy.max_rotation)
    scale = rng.uniform(*policy.scale_range)
    flip = u[0] < policy.flip_p
    rotate = u[1] < policy.rotate_p
    rescale = u[2] < policy.scale_p
    if flip:
        image, mask = image.flip(-1), mask.flip(-1)
    if rotate or rescale:
        theta = math.radians(angle if rotate else 0.0)
        s = scale if rescale else 1.0
        cos, sin = math.cos(theta) / s, math.sin(theta) / s
        h, w = image.shape[-2:]
        # affine_grid works in normalized coords; correct the aspect ratio for non-square maps
        mat = torch.tensor(
            [[cos, -sin * h / w, 0.0], [sin * w / h, cos, 0.0]], dtype=torch.float32
        )[None]
        grid = F.affine_grid(mat, (1, 1, h, w), align_corners=False)
        image = F.grid_sample(image[None].float(), grid, mode="bilinear", align_corners=False)[0]
        mask = F.grid_sample(mask[None].float(), grid, mode="nearest", align_corners=False)[0]
    return image, (mask >= 0.5).to(mask.dtype if mask.is_floating_point() else torch.float32)


def kfold_split(records, k=5, seed=0, stratify=True) -> dict[str, int]:
    """Assign every record to one of ``k`` folds; returns ``{id: fold}``.

    Records are shuffled within each category and dealt round-robin, the
    dealing position carrying over between categories, so each category is
    spread within one sample per fold and overall sizes stay balanced.
    The ``normal`` category is dealt last, so dropping it leaves the tumor
    assignments unchanged.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    records = list(records)
    if len(records) < k:
        raise DataError(f"{len(records)} records cannot be split into {k} folds")
    rng = np.random.default_rng(seed)
    if stratify:
        groups = {}
        for r in records:
            groups.setdefault(r.category, []).append(r.id)
        order = sorted(groups, key=lambda c: (c == "normal", c))
        strata = [sorted(groups[c]) for c in order]
    else:
        strata = [sorted(r.id for r in records)]
    assignment = {}
    offset = 0
    for ids in strata:
        for i, idx in enumerate(rng.permutation(len(ids))):
            assignment[ids[idx]] = (offset + i) % k
        offset = (offset + len(ids)) % k
    return assignment


def apply_folds(records, assignment):
    for r in records:
        r.fold = assignment[r.id]
    return records


def build_manifest(records, assignment, *, k, seed, normalization=None, root=None, layout=None) -> dict:
    manifest = {
        "seed": seed,
        "k": k,
        "records": [
            {"id": r.id, "fold": assignment[r.id], "category": r.category, "mask_count": r.mask_count}
            for r in sorted(records, key=lambda r: r.id)
        ],
        "normalization": normalization,
    }
    if root is not None:
        manifest["root"] = str(root)
        manifest["layout"] = layout
    return manifest


def write_manifest(manifest: dict, path):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for key in ("seed", "k", "records"):
        if key not in manifest:
            raise DataError(f"manifest {path} lacks {key!r}")
    return manifest


def records_from_manifest(manifest: dict, exclude_normal=False) -> list[SampleRecord]:
    """Re-scan the manifest's dataset root and attach fold assignments."""
    if "root" not in manifest:
        raise DataError("manifest has no dataset root; re-create it with `pbnet split`")
    records = scan_dataset(manifest["root"], manifest.get("layout", "busi"))
    folds = {r["id"]: r["fold"] for r in manifest["records"]}
    missing = [r.id for r in records if r.id not in folds]
    if missing:
        raise DataError(f"{len(missing)} scanned records are absent from the manifest, e.g. {missing[:3]}")
    out = []
    for r in records:
        if exclude_normal and r.category == "normal":
            continue
        r.fold = folds[r.id]
        out.append(r)
    return out


# ----------------------------------------------------------------------------- phantoms


@dataclass
class Phantom:
    id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    contrast: float


def _ellipse(size, cy, cx, ay, ax, angle):
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _phantom_mask(rng, size, n_lesions):
    for _ in range(100):
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_lesions):
            ay, ax = rng.uniform(0.1, 0.28, size=2) * size
            cy, cx = rng.uniform(0.3, 0.7, size=2) * size
            mask |= _ellipse(size, cy, cx, ay, ax, rng.uniform(0, math.pi))
        if 0.02 <= mask.mean() <= 0.40:
            return mask
    raise RuntimeError("could not place phantom lesions")  # pragma: no cover


def generate_phantoms(count, size=64, seed=0, contrast=(0.35, 0.7), max_lesions=2) -> list[Phantom]:
    """Speckled ultrasound-like images with 1-2 elliptical hypoechoic lesions.

    ``contrast`` is the fractional darkening of the lesions (a float or a
    range); 0 gives lesions with no intensity difference, the mask stays exact.
    """
    if count < 1:
        raise ConfigError("phantom count must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = (contrast, contrast) if np.isscalar(contrast) else contrast
    out = []
    for i in range(count):
        mask = _phantom_mask(rng, size, int(rng.integers(1, max_lesions + 1)))
        c = float(rng.uniform(lo, hi))
        speckle = rng.rayleigh(1.0, size=(size, size))
        gradient = np.linspace(1.0, 0.7, size)[:, None]  # depth attenuation
        tissue = 0.45 * gradient * (1.0 - c * mask)
        img = np.clip(tissue * speckle, 0, 1)
        u8 = np.round(img * 255).astype(np.uint8)
        out.append(Phantom(f"phantom_{i:04d}", np.repeat(u8[..., None], 3, axis=2), mask.astype(np.uint8), c))
    return out


def write_phantoms(phantoms, root) -> list[SampleRecord]:
    """Write phantoms in the ``generic`` layout and return their records."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for ph in phantoms:
        Image.fromarray(ph.image).save(root / "images" / f"{ph.id}.png")
        Image.fromarray(ph.mask * 255).save(root / "masks" / f"{ph.id}.png")
    return scan_dataset(root, "generic")


# ----------------------------------------------------------------------------- torch dataset


class SegmentationDataset(torch.utils.data.Dataset):
    """In-memory resized uint8 images + binary masks with seeded augmentation.

    Each sample's augmentation RNG is derived from ``(seed, epoch, index)``,
    so results do not depend on loader worker count or iteration order.
    """

    def __init__(self, images, masks, ids=None, normalization=None, policy=None, seed=0):
        self.images = np.asarray(images)
        self.masks = np.asarray(masks)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DataError(f"expected (N, H, W, 3) uint8 images, got {self.images.shape}")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.images))]
        self.normalization = normalization or channel_stats(self.images)
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    @classmethod
    def from_records(cls, records, size, normalization=None, policy=None, seed=0):
        pairs = [load_resized(r, size) for r in records]
        images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, *size, 3), np.uint8)
        masks = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, *size), np.uint8)
        return cls(images, masks, [r.id for r in records], normalization, policy, seed)

    @classmethod
    def from_phantoms(cls, phantoms, normalization=None, policy=None, seed=0):
        return cls(
            np.stack([p.image for p in phantoms]),
            np.stack([p.mask for p in phantoms]),
            [p.id for p in phantoms],
            normalization,
            policy,
            seed,
        )

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        x = torch.from_numpy(
            normalize(self.images[index], self.normalization["mean"], self.normalization["std"])
        )
        y = torch.from_numpy(self.masks[index].astype(np.float32))[None]
        if self.policy is not None and self.policy.enabled:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            x, y = augment(x, y, self.policy, rng)
        return x, y
