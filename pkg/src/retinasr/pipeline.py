"""Preprocessing, augmentation, patching and splitting of phantom scans.

The order is fixed: median filter, unsharp mask, geometric augmentation,
sliding-window patching, then 4x area downsampling of each image patch to
form the low-resolution generator input.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .classes import BACKGROUND, N_CLASSES, render_labels_rgb

log = logging.getLogger(__name__)

PATCH_SIZE = 224
OVERLAP = 0.75
SCALE = 4
MAX_ROTATION = 15.0
TRANSLATE_FRACTION = 0.10


def median_filter3(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 3:
        raise ValueError(f"median_filter3 needs a 2-D image of at least 3x3, got {image.shape}")
    return ndimage.median_filter(image, size=3, mode="nearest")


def unsharp_mask(image, sigma=1.0, amount=1.0, clip=True):
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if amount < 0:
        raise ValueError("amount must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    blurred = ndimage.gaussian_filter(image, sigma=sigma, mode="nearest")
    out = image + amount * (image - blurred)
    return np.clip(out, 0.0, 1.0) if clip else out


def preprocess(image, sigma=1.0, amount=1.0):
    return unsharp_mask(median_filter3(image), sigma=sigma, amount=amount)


@dataclass(frozen=True)
class Augmentation:
    """A fully parameterised geometric transform.

    ``kind`` is one of identity, hflip, rotate, translate. Angles are in
    degrees (counter-clockwise in display coordinates); shifts in pixels.
    """

    kind: str = "identity"
    angle: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "hflip", "rotate", "translate"):
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if abs(self.angle) > MAX_ROTATION + 1e-9:
            raise ValueError(f"rotation must lie in [-15, 15] degrees, got {self.angle}")

    def describe(self):
        if self.kind == "rotate":
            return f"rotate({self.angle:.4f})"
        if self.kind == "translate":
            return f"translate({self.dx:.4f},{self.dy:.4f})"
        return self.kind


_DESCRIPTOR = re.compile(r"^(\w+)(?:\(([^)]*)\))?$")


def parse_augmentation(text, rng=None, patch=PATCH_SIZE):
    """Parse ``hflip``, ``rotate(10)``, ``translate(3,-4)`` or a bare kind.

    A bare ``rotate`` or ``translate`` draws its parameters from ``rng``.
    """
    if isinstance(text, Augmentation):
        return text
    m = _DESCRIPTOR.match(text.strip())
    if not m:
        raise ValueError(f"bad augmentation descriptor {text!r}")
    kind, args = m.group(1), m.group(2)
    if kind in ("identity", "hflip"):
        return Augmentation(kind)
    if args:
        values = [float(v) for v in args.split(",")]
        if kind == "rotate":
            return Augmentation("rotate", angle=values[0])
        if kind == "translate":
            return Augmentation("translate", dx=values[0], dy=values[1])
    if rng is None:
        rng = np.random.default_rng()
    if kind == "rotate":
        return Augmentation("rotate", angle=float(rng.uniform(-MAX_ROTATION, MAX_ROTATION)))
    if kind == "translate":
        limit = TRANSLATE_FRACTION * patch
        dx, dy = rng.uniform(-limit, limit, size=2)
        return Augmentation("translate", dx=float(dx), dy=float(dy))
    raise ValueError(f"unknown augmentation {text!r}")


def _affine(aug, shape):
    """Matrix/offset mapping output (row, col) to input coordinates."""
    if aug.kind == "rotate":
        t = math.radians(aug.angle)
        c, s = math.cos(t), math.sin(t)
        matrix = np.array([[c, s], [-s, c]])
        center = (np.asarray(shape, dtype=np.float64) - 1) / 2
        return matrix, center - matrix @ center
    # translate: content moves by (dy, dx)
    return np.eye(2), -np.array([aug.dy, aug.dx])


def augment(image, labels, op, seed=None):
    """Apply one geometric transform to an image and its label map.

    Images use bilinear interpolation with reflected borders; labels use
    nearest-neighbour interpolation with background fill, with identical
    geometric parameters.
    """
    aug = parse_augmentation(op, np.random.default_rng(seed), patch=PATCH_SIZE)
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    if image.shape != labels.shape:
        raise ValueError("image and labels must share a shape")
    if aug.kind == "identity":
        return image.copy(), labels.copy()
    if aug.kind == "hflip":
        return image[:, ::-1].copy(), labels[:, ::-1].copy()
    matrix, offset = _affine(aug, image.shape)
    out_img = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="reflect")
    out_lbl = ndimage.affine_transform(labels, matrix, offset=offset, order=0,
                                       mode="constant", cval=BACKGROUND)
    return np.clip(out_img, 0.0, 1.0), out_lbl.astype(labels.dtype)


def window_origins(length, patch=PATCH_SIZE, stride=None):
    if stride is None:
        stride = patch - int(round(patch * OVERLAP))
    if length < patch:
        raise ValueError(f"input length {length} smaller than patch {patch}")
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def extract_patches(array, patch=PATCH_SIZE, overlap=OVERLAP):
    """Row-major sliding windows; returns a list of ``((row, col), patch)``."""
    array = np.asarray(array)
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    stride = patch - int(round(patch * overlap))
    h, w = array.shape[:2]
    if h < patch or w < patch:
        raise ValueError(f"input {array.shape[:2]} smaller than patch {patch}")
    rows = window_origins(h, patch, stride)
    cols = window_origins(w, patch, stride)
    return [((r, c), array[r:r + patch, c:c + patch]) for r in rows for c in cols]


def downsample4(patch):
    """Area average over non-overlapping 4x4 blocks."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] % SCALE or patch.shape[1] % SCALE:
        raise ValueError(f"downsample4 needs a 2-D input divisible by 4, got {patch.shape}")
    h, w = patch.shape
    return patch.reshape(h // SCALE, SCALE, w // SCALE, SCALE).mean(axis=(1, 3))


def downsample_labels4(labels):
    """Majority vote over 4x4 blocks; ties go to the lowest class index."""
    labels = np.asarray(labels)
    if labels.shape[-1] % SCALE or labels.shape[-2] % SCALE:
        raise ValueError(f"label map {labels.shape} not divisible by 4")
    *lead, h, w = labels.shape
    blocks = labels.reshape(*lead, h // SCALE, SCALE, w // SCALE, SCALE)
    onehot = blocks[..., None] == np.arange(N_CLASSES)
    counts = onehot.sum(axis=(-4, -2))
    return counts.argmax(axis=-1).astype(np.uint8)


@dataclass
class PatchPair:
    pair_id: str
    input_lr: np.ndarray
    target_label_hr: np.ndarray
    provenance: dict = field(default_factory=dict)
    image_hr: np.ndarray | None = None

    @property
    def target_rgb_hr(self):
        return render_labels_rgb(self.target_label_hr)

    @property
    def patient_id(self):
        return self.provenance.get("patient_id", "")


def build_patch_dataset(scans, aug_plan=("identity",), patch=PATCH_SIZE, overlap=OVERLAP,
                        seed=0, sigma=1.0, amount=1.0, keep_hr=False):
    """Turn scans into PatchPairs; returns ``(pairs, stats)``.

    Random augmentation parameters are seeded per (seed, scan index, plan index).
    """
    plan = list(aug_plan)
    if not plan:
        raise ValueError("aug_plan must name at least one operation")
    pairs = []
    per_op = {}
    for i, scan in enumerate(scans):
        clean = preprocess(scan.image, sigma=sigma, amount=amount)
        for j, op in enumerate(plan):
            rng = np.random.default_rng([seed, i, j])
            aug = parse_augmentation(op, rng, patch=patch)
            image, labels = augment(clean, scan.labels, aug)
            img_patches = extract_patches(image, patch, overlap)
            lbl_patches = extract_patches(labels, patch, overlap)
            for ((r, c), hr), (_, lbl) in zip(img_patches, lbl_patches):
                pairs.append(PatchPair(
                    pair_id=f"{scan.scan_id}_a{j}_r{r:04d}_c{c:04d}",
                    input_lr=downsample4(hr).astype(np.float32),
                    target_label_hr=lbl.astype(np.uint8).copy(),
                    provenance={
                        "scan_id": scan.scan_id,
                        "patient_id": scan.patient_id,
                        "offset": [int(r), int(c)],
                        "augmentation": aug.describe(),
                    },
                    image_hr=hr.copy() if keep_hr else None,
                ))
            per_op[aug.kind] = per_op.get(aug.kind, 0) + len(img_patches)
    stats = {
        "n_scans": len(scans),
        "n_augmented_copies": len(scans) * len(plan),
        "n_pairs": len(pairs),
        "pairs_per_operation": dict(sorted(per_op.items())),
        "patch": patch,
        "overlap": overlap,
    }
    return pairs, stats


@dataclass
class SplitManifest:
    train: list
    test: list
    policy: str = "by-patient"
    ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test splits overlap")

    def to_dict(self):
        return {"policy": self.policy, "ratio": self.ratio, "seed": self.seed,
                "train": list(self.train), "test": list(self.test)}


def split_dataset(pairs, ratio=0.8, policy="by-patient", seed=0):
    if not pairs:
        raise ValueError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if policy == "by-patch":
        ids = [p.pair_id for p in pairs]
        order = rng.permutation(len(ids))
        n_train = int(round(ratio * len(ids)))
        train = sorted(ids[k] for k in order[:n_train])
        test = sorted(ids[k] for k in order[n_train:])
    elif policy == "by-patient":
        patients = sorted({p.patient_id for p in pairs})
        if len(patients) < 2:
            raise ValueError("a by-patient split needs at least 2 patients")
        order = rng.permutation(len(patients))
        n_train = min(max(int(round(ratio * len(patients))), 1), len(patients) - 1)
        train_patients = {patients[k] for k in order[:n_train]}
        train = sorted(p.pair_id for p in pairs if p.patient_id in train_patients)
        test = sorted(p.pair_id for p in pairs if p.patient_id not in train_patients)
    else:
        raise ValueError(f"unknown split policy {policy!r}")
    return SplitManifest(train=train, test=test, policy=policy, ratio=ratio, seed=seed)


def select(pairs, ids):
    index = {p.pair_id: p for p in pairs}
    return [index[i] for i in ids]


def format_stats(stats):
    lines = []
    for key, value in stats.items():
        if isinstance(value, dict):
            for k, v in value.items():
                lines.append(f"{key}.{k}: {v}")
        else:
            lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def save_patch_store(pairs, split: SplitManifest, directory, stats=None):
    """One directory per split with input (.npy), label and rgb (.png) files."""
    directory = Path(directory)
    side = {i: "train" for i in split.train}
    side.update({i: "test" for i in split.test})
    records = []
    for pair in pairs:
        name = side.get(pair.pair_id)
        if name is None:
            continue
        sub = directory / name
        sub.mkdir(parents=True, exist_ok=True)
        np.save(sub / f"{pair.pair_id}_input.npy", pair.input_lr.astype(np.float32))
        Image.fromarray(pair.target_label_hr.astype(np.uint8)).save(sub / f"{pair.pair_id}_label.png")
        rgb = np.round(pair.target_rgb_hr * 255).astype(np.uint8)
        Image.fromarray(rgb).save(sub / f"{pair.pair_id}_rgb.png")
        records.append({"pair_id": pair.pair_id, "split": name, **pair.provenance})
    manifest = {"split": split.to_dict(), "pairs": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if stats is not None:
        (directory / "stats.txt").write_text(format_stats(stats))
    return directory / "manifest.json"


def load_patch_store(directory):
    """Returns ``(pairs, SplitManifest)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    pairs = []
    for rec in manifest["pairs"]:
        sub = directory / rec["split"]
        pid = rec["pair_id"]
        provenance = {k: v for k, v in rec.items() if k not in ("pair_id", "split")}
        pairs.append(PatchPair(
            pair_id=pid,
            input_lr=np.load(sub / f"{pid}_input.npy"),
            target_label_hr=np.asarray(Image.open(sub / f"{pid}_label.png"), dtype=np.uint8),
            provenance=provenance,
        ))
    s = manifest["split"]
    split = SplitManifest(train=s["train"], test=s["test"], policy=s["policy"],
                          ratio=s["ratio"], seed=s["seed"])
    return pairs, split
