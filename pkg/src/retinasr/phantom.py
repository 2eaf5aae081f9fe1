"""Synthetic layered-retina B-scans with exact ground-truth label maps.

Each scan is a stack of seven bands (ILM down to ONL) under a background
region. Band boundaries are natural cubic splines through jittered control
points, so every column of the label map is non-decreasing from top to bottom.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline

from .classes import N_CLASSES, N_LAYERS

log = logging.getLogger(__name__)

DEFAULT_PALETTE = (0.05, 0.95, 0.75, 0.35, 0.60, 0.25, 0.50, 0.15)

# Mean band thickness of layers ILM..OPL as a fraction of scan height; ONL
# takes whatever is left below.
_LAYER_FRACTIONS = (0.05, 0.09, 0.09, 0.08, 0.07, 0.06)
_TOP_FRACTION = 0.18


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 448
    width: int = 448
    n_layers: int = N_LAYERS
    min_thickness: int = 8
    boundary_smoothness: int = 64
    speckle_strength: float = 0.2
    intensity_palette: tuple = DEFAULT_PALETTE
    seed: int = 0

    def __post_init__(self):
        if self.n_layers != N_LAYERS:
            raise ValueError(f"n_layers must be {N_LAYERS}, got {self.n_layers}")
        if self.height < 1 or self.width < 1:
            raise ValueError("scan dimensions must be positive")
        if self.min_thickness < 1 or self.min_thickness * N_LAYERS >= self.height:
            raise ValueError(
                f"{N_LAYERS} layers of min_thickness={self.min_thickness} "
                f"do not fit in height={self.height}"
            )
        if self.boundary_smoothness < 1:
            raise ValueError("boundary_smoothness must be positive")
        if self.speckle_strength < 0:
            raise ValueError("speckle_strength must be >= 0")
        palette = tuple(float(v) for v in self.intensity_palette)
        if len(palette) != N_CLASSES:
            raise ValueError(f"intensity_palette needs {N_CLASSES} entries")
        if len(set(palette)) != N_CLASSES:
            raise ValueError("intensity_palette entries must be pairwise distinct")
        if min(palette) < 0 or max(palette) > 1:
            raise ValueError("intensity_palette entries must lie in [0, 1]")
        object.__setattr__(self, "intensity_palette", palette)


@dataclass
class Scan:
    image: np.ndarray
    labels: np.ndarray
    scan_id: str = "scan"
    patient_id: str = "patient"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(
                f"image {self.image.shape} and labels {self.labels.shape} differ"
            )


def add_speckle(image, strength, seed):
    """Multiplicative speckle ``clip(image * n, 0, 1)``.

    ``n = 1 + strength * (z**2 - 1) / sqrt(2)`` with ``z`` standard normal, so
    the noise has mean 1 and variance ``strength**2``.
    """
    if strength < 0:
        raise ValueError("strength must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if strength == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(image.shape)
    noise = 1.0 + strength * (z * z - 1.0) / np.sqrt(2.0)
    return np.clip(image * noise, 0.0, 1.0)


def _smooth_curve(rng, width, spacing, mean, std):
    xs = np.arange(0, width, spacing, dtype=np.float64)
    if xs[-1] != width - 1:
        xs = np.append(xs, width - 1)
    if len(xs) < 2:
        return np.full(width, mean + std * rng.standard_normal())
    ys = mean + std * rng.standard_normal(len(xs))
    return CubicSpline(xs, ys, bc_type="natural")(np.arange(width))


def _layer_boundaries(config, rng):
    """Integer row index where each of the 7 bands starts, shape (7, width)."""
    h, w, m = config.height, config.width, config.min_thickness
    s = config.boundary_smoothness

    u = np.linspace(-1.0, 1.0, w)
    bow = 0.05 * h * rng.standard_normal()
    top = _smooth_curve(rng, w, s, _TOP_FRACTION * h, 0.03 * h) + bow * (u**2 - 0.5)

    extras = []
    for frac in _LAYER_FRACTIONS:
        mean = max(frac * h - m, 0.0)
        curve = _smooth_curve(rng, w, s, mean, 0.25 * mean + 0.5)
        extras.append(np.maximum(curve, 0.0))
    extras = np.stack(extras)

    # Squeeze the stack so that ONL keeps at least min_thickness rows.
    top = np.clip(top, 1.0, None)
    budget = h - m - (N_LAYERS - 1) * m
    excess = top + extras.sum(axis=0) - budget
    cut_top = np.clip(excess, 0.0, top - 1.0)
    top = top - cut_top
    excess = excess - cut_top
    total_extra = extras.sum(axis=0)
    scale = np.where(
        excess > 0, (total_extra - excess) / np.maximum(total_extra, 1e-12), 1.0
    )
    extras = extras * np.clip(scale, 0.0, 1.0)

    thickness = m + np.floor(extras).astype(np.int64)
    start = np.floor(top).astype(np.int64)
    bounds = np.concatenate([start[None], start[None] + np.cumsum(thickness, axis=0)])
    return bounds


def generate_scan(config: PhantomConfig, scan_id="scan", patient_id="patient") -> Scan:
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    bounds = _layer_boundaries(config, rng)
    rows = np.arange(config.height)[:, None, None]
    labels = (rows >= bounds[None, :, :]).sum(axis=1).astype(np.uint8)

    palette = np.asarray(config.intensity_palette, dtype=np.float64)
    clean = palette[labels]
    speckle_seed = int(seeds[1].generate_state(1, dtype=np.uint64)[0])
    image = add_speckle(clean, config.speckle_strength, speckle_seed)
    return Scan(image=image, labels=labels, scan_id=scan_id, patient_id=patient_id,
                seed=config.seed)


def scan_seed(base_seed, patient, scan):
    """64-bit seed derived from (base seed, patient index, scan index)."""
    ss = np.random.SeedSequence([int(base_seed), int(patient), int(scan)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generate_dataset(n_patients, scans_per_patient, config: PhantomConfig):
    if n_patients < 1 or scans_per_patient < 1:
        raise ValueError("n_patients and scans_per_patient must be positive")
    scans = []
    for p in range(n_patients):
        for s in range(scans_per_patient):
            cfg = dataclasses.replace(config, seed=scan_seed(config.seed, p, s))
            scans.append(generate_scan(cfg, scan_id=f"p{p:03d}_s{s:02d}",
                                       patient_id=f"p{p:03d}"))
    return scans


def save_dataset(scans, directory, config: PhantomConfig | None = None):
    """Write 8-bit image/label PNGs per scan plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for scan in scans:
        img_path = Path("images") / f"{scan.scan_id}.png"
        lbl_path = Path("labels") / f"{scan.scan_id}.png"
        pixels = np.round(np.clip(scan.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(directory / img_path)
        Image.fromarray(scan.labels.astype(np.uint8)).save(directory / lbl_path)
        entries.append({
            "scan_id": scan.scan_id,
            "patient_id": scan.patient_id,
            "image": img_path.as_posix(),
            "labels": lbl_path.as_posix(),
            "seed": int(scan.seed),
        })
    manifest = {
        "config": dataclasses.asdict(config) if config is not None else None,
        "scans": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d scans to %s", len(scans), directory)
    return path


def load_dataset(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    scans = []
    for e in manifest["scans"]:
        image = np.asarray(Image.open(directory / e["image"]), dtype=np.float64) / 255.0
        labels = np.asarray(Image.open(directory / e["labels"]), dtype=np.uint8)
        scans.append(Scan(image=image, labels=labels, scan_id=e["scan_id"],
                          patient_id=e["patient_id"], seed=e["seed"]))
    return scans
