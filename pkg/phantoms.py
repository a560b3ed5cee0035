#!/usr/bin/env python3
"""
LUNA16-format phantom cohorts
Writes MetaImage CT volumes, companion lung segmentations and an
annotations CSV with the same layout as the real dataset
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import SimpleITK as sitk

from errors import ConfigError

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -800.0
NODULE_CORE_HU = 100.0
NODULE_RIM_DROP = 500.0

# Companion segmentation product label IDs
SEG_LEFT_LUNG = 3
SEG_RIGHT_LUNG = 4
SEG_TRACHEA = 5


@dataclass(frozen=True)
class PhantomNodule:
    center_xyz: Tuple[float, float, float]  # world mm
    radius_mm: float


def _write_metaimage(array_zyx: np.ndarray, spacing: Sequence[float], origin: Sequence[float], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    image = sitk.GetImageFromArray(array_zyx)
    image.SetSpacing(tuple(float(s) for s in spacing))
    image.SetOrigin(tuple(float(o) for o in origin))
    sitk.WriteImage(image, str(path), False)
    return path


def _ellipse(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def make_phantom_volume(rng: np.random.Generator, shape: Tuple[int, int, int] = (12, 64, 64),
                        spacing: Tuple[float, float, float] = (1.0, 1.0, 2.0),
                        origin: Tuple[float, float, float] = (-32.0, -32.0, -100.0),
                        n_nodules: int = 1, with_lungs: bool = True, noise_hu: float = 10.0
                        ) -> Tuple[np.ndarray, np.ndarray, List[PhantomNodule]]:
    """
    One synthetic chest volume

    Args:
        shape: (depth, height, width)
        spacing, origin: (x, y, z) mm

    Returns:
        (HU int16 volume, segmentation uint8 volume, nodules); both volumes (z, y, x)
    """
    depth, height, width = shape
    if depth < 4 or height < 32 or width < 32:
        raise ConfigError(f"phantom shape {shape} too small (need depth >= 4, height/width >= 32)")

    hu = np.full(shape, AIR_HU, dtype=np.float64)
    seg = np.zeros(shape, dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    body = _ellipse(xx, yy, width / 2, height / 2, 0.45 * width, 0.40 * height)
    # patient left is image right
    right_lung = _ellipse(xx, yy, 0.32 * width, 0.52 * height, 0.12 * width, 0.24 * height)
    left_lung = _ellipse(xx, yy, 0.68 * width, 0.52 * height, 0.12 * width, 0.24 * height)
    trachea = _ellipse(xx, yy, 0.5 * width, 0.24 * height, 0.04 * width, 0.04 * height)

    lung_slices = range(1, depth - 1) if with_lungs else range(0)
    for z in range(depth):
        hu[z][body] = BODY_HU
        hu[z][trachea] = AIR_HU
        seg[z][trachea] = SEG_TRACHEA
        if z in lung_slices:
            hu[z][left_lung | right_lung] = LUNG_HU
            seg[z][left_lung] = SEG_LEFT_LUNG
            seg[z][right_lung] = SEG_RIGHT_LUNG

    nodules: List[PhantomNodule] = []
    if with_lungs:
        zs = np.arange(depth) * spacing[2] + origin[2]
        xs = np.arange(width) * spacing[0] + origin[0]
        ys = np.arange(height) * spacing[1] + origin[1]
        for n in range(n_nodules):
            lung_cx = (0.68 if n % 2 == 0 else 0.32) * width
            ci = lung_cx + rng.uniform(-0.04, 0.04) * width
            cj = 0.52 * height + rng.uniform(-0.06, 0.06) * height
            ck = rng.uniform(2, depth - 3)
            radius = float(rng.uniform(2.5, 3.5)) * min(spacing[0], spacing[1])
            center = (float(ci * spacing[0] + origin[0]), float(cj * spacing[1] + origin[1]),
                      float(ck * spacing[2] + origin[2]))
            d2 = ((zs[:, None, None] - center[2]) ** 2 + (ys[None, :, None] - center[1]) ** 2
                  + (xs[None, None, :] - center[0]) ** 2)
            inside = d2 <= radius ** 2
            # bright core fading to the rim
            hu[inside] = NODULE_CORE_HU - NODULE_RIM_DROP * d2[inside] / radius ** 2
            nodules.append(PhantomNodule(center_xyz=center, radius_mm=radius))

    hu += rng.normal(0.0, noise_hu, size=shape)
    return np.clip(np.rint(hu), -1024, 3071).astype(np.int16), seg, nodules


def write_phantom_cohort(out_dir: Union[str, Path], n_patients: int = 3, seed: int = 0,
                         shape: Tuple[int, int, int] = (12, 64, 64),
                         spacing: Tuple[float, float, float] = (1.0, 1.0, 2.0),
                         lungless_patients: Sequence[int] = ()) -> Dict[str, Path]:
    """
    Write a phantom cohort in LUNA16 layout

    <out_dir>/subset0/<series>.mhd, <out_dir>/seg-lungs-LUNA16/<series>.mhd,
    <out_dir>/annotations.csv. Every patient with lungs gets 1 or 2 nodules.

    Returns:
        Paths for data_root, segmentation_dir and annotations_csv
    """
    if n_patients < 1:
        raise ConfigError("phantom cohort needs at least one patient")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    origin = (-shape[2] * spacing[0] / 2, -shape[1] * spacing[1] / 2, -100.0)

    rows = []
    for i in range(n_patients):
        series_id = f"phantom.{seed}.{i:03d}"
        with_lungs = i not in set(lungless_patients)
        hu, seg, nodules = make_phantom_volume(rng, shape, spacing, origin, n_nodules=1 + i % 2,
                                               with_lungs=with_lungs)
        _write_metaimage(hu, spacing, origin, out_dir / "subset0" / f"{series_id}.mhd")
        _write_metaimage(seg, spacing, origin, out_dir / "seg-lungs-LUNA16" / f"{series_id}.mhd")
        for nodule in nodules:
            rows.append({"seriesuid": series_id, "coordX": nodule.center_xyz[0], "coordY": nodule.center_xyz[1],
                         "coordZ": nodule.center_xyz[2], "diameter_mm": 2 * nodule.radius_mm})

    annotations_csv = out_dir / "annotations.csv"
    pd.DataFrame(rows, columns=["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]).to_csv(
        annotations_csv, index=False)
    logger.info(f"🧪 Wrote {n_patients} phantom series and {len(rows)} annotations to {out_dir}")
    return {
        "data_root": out_dir,
        "segmentation_dir": out_dir / "seg-lungs-LUNA16",
        "annotations_csv": annotations_csv,
    }


def phantom_label_maps(n: int, size: int = 32, seed: int = 0, nodule_every: Optional[int] = 2) -> List[np.ndarray]:
    """2D label maps with body, lungs and (every other map) a nodule, for model tests"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    maps = []
    for idx in range(n):
        labels = np.zeros((size, size), dtype=np.uint8)
        labels[_ellipse(xx, yy, size / 2, size / 2, 0.45 * size, 0.40 * size)] = 4
        labels[_ellipse(xx, yy, 0.32 * size, 0.52 * size, 0.12 * size, 0.24 * size)] = 2
        labels[_ellipse(xx, yy, 0.68 * size, 0.52 * size, 0.12 * size, 0.24 * size)] = 1
        labels[_ellipse(xx, yy, 0.5 * size, 0.24 * size, 0.04 * size, 0.04 * size)] = 3
        if nodule_every and idx % nodule_every == 0:
            cx = (0.68 if rng.random() < 0.5 else 0.32) * size + rng.uniform(-1, 1)
            cy = 0.52 * size + rng.uniform(-0.1, 0.1) * size
            labels[_ellipse(xx, yy, cx, cy, 0.06 * size, 0.06 * size)] = 5
        maps.append(labels)
    return maps
