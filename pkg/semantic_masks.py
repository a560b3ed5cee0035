#!/usr/bin/env python3
"""
Per-slice semantic label maps
Nodule masks (spherical crop + two-center threshold), body masks
(threshold, hole fill, largest component) and fixed-precedence composition
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from errors import (ContractError, DataIntegrityError, DegenerateClusterError,
                    EmptyBodyError, EmptyROIError)
from ingest import CTVolume, LungStructures, NoduleAnnotation, to_uint8, window_hu
from logger import WarningRecord

logger = logging.getLogger(__name__)

BACKGROUND = 0
LEFT_LUNG = 1
RIGHT_LUNG = 2
TRACHEA = 3
BODY = 4
NODULE = 5

LABEL_NAMES = {
    BACKGROUND: "background",
    LEFT_LUNG: "left_lung",
    RIGHT_LUNG: "right_lung",
    TRACHEA: "trachea",
    BODY: "body",
    NODULE: "nodule",
}
NUM_CLASSES = len(LABEL_NAMES)

# 8-connected foreground
FOREGROUND_STRUCTURE = np.ones((3, 3), dtype=bool)

MAX_LLOYD_ITERATIONS = 100


@dataclass(frozen=True)
class SemanticLabelMap:
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ContractError(f"label map must be 2D, got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ContractError(f"label map values must lie in 0..{NUM_CLASSES - 1}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.labels.shape

    @property
    def has_nodule(self) -> bool:
        return bool(np.any(self.labels == NODULE))

    @property
    def nodule_pixels(self) -> int:
        return int(np.count_nonzero(self.labels == NODULE))

    def mask_of(self, label: int) -> np.ndarray:
        return self.labels == label


@dataclass(frozen=True)
class NoduleROI:
    """Pixels of one slice inside an annotation sphere"""
    rows: np.ndarray
    cols: np.ndarray
    intensities: np.ndarray
    shape: Tuple[int, int]
    slice_index: int
    annotation: NoduleAnnotation

    @property
    def size(self) -> int:
        return int(self.rows.size)

    def disk_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.rows, self.cols] = True
        return mask


def _plane_offset_mm(volume: CTVolume, ann: NoduleAnnotation, slice_index: int) -> float:
    plane_z = slice_index * volume.spacing[2] + volume.origin[2]
    return plane_z - ann.center_world[2]


def crop_spherical_roi(volume: CTVolume, ann: NoduleAnnotation, slice_index: int) -> NoduleROI:
    """
    Cross-section of the annotation's closed ball with one axial slice

    Raises:
        EmptyROIError: the slice plane misses the sphere or no pixel center falls inside
    """
    depth, height, width = volume.voxels.shape
    if not 0 <= slice_index < depth:
        raise ContractError(f"slice index {slice_index} outside 0..{depth - 1}")

    r = ann.radius_mm
    dz = _plane_offset_mm(volume, ann, slice_index)
    if dz * dz > r * r:
        raise EmptyROIError(f"{volume.series_id} slice {slice_index}: plane is {abs(dz):.2f} mm from "
                            f"nodule center, radius {r:.2f} mm")

    xs = np.arange(width) * volume.spacing[0] + volume.origin[0] - ann.center_world[0]
    ys = np.arange(height) * volume.spacing[1] + volume.origin[1] - ann.center_world[1]
    dist2 = ys[:, None] ** 2 + xs[None, :] ** 2 + dz * dz
    rows, cols = np.nonzero(dist2 <= r * r)
    if rows.size == 0:
        raise EmptyROIError(f"{volume.series_id} slice {slice_index}: no pixel center inside the nodule sphere")

    return NoduleROI(
        rows=rows,
        cols=cols,
        intensities=np.asarray(volume.voxels[slice_index][rows, cols], dtype=np.float64),
        shape=(height, width),
        slice_index=slice_index,
        annotation=ann,
    )


def _best_split(sorted_values: np.ndarray) -> int:
    """Index k minimizing within-cluster SSE of sorted[:k] | sorted[k:]"""
    n = sorted_values.size
    prefix = np.cumsum(sorted_values)
    total = prefix[-1]
    k = np.arange(1, n)
    left = prefix[:-1]
    right = total - left
    # total sum of squares is constant, so maximize between-cluster term
    between = left ** 2 / k + right ** 2 / (n - k)
    valid = sorted_values[1:] > sorted_values[:-1]
    between = np.where(valid, between, -np.inf)
    return int(np.argmax(between)) + 1


def _lloyd(x: np.ndarray, c_low: float, c_high: float) -> Tuple[float, float]:
    """Nearest-center assignment (ties to the lower center) and mean updates until the centers stop moving"""
    for _ in range(MAX_LLOYD_ITERATIONS):
        high = np.abs(x - c_high) < np.abs(x - c_low)
        if high.all() or not high.any():
            break
        new_low, new_high = x[~high].mean(), x[high].mean()
        if new_low == c_low and new_high == c_high:
            break
        c_low, c_high = new_low, new_high
    return c_low, c_high


def _sse(x: np.ndarray, c_low: float, c_high: float) -> float:
    return float(np.minimum((x - c_low) ** 2, (x - c_high) ** 2).sum())


def two_means(values: Sequence[float]) -> Tuple[float, float]:
    """
    1-D two-means run to convergence

    Centers start at the ROI minimum and maximum. If that run settles in a
    local optimum, the SSE-optimal contiguous split of the sorted values
    replaces it as the starting point.

    Returns:
        (c_low, c_high)
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2 or x.min() == x.max():
        raise DegenerateClusterError(f"two-means needs >= 2 distinct values, got {x.size} value(s) "
                                     f"spanning {np.ptp(x) if x.size else 0}")

    c_low, c_high = _lloyd(x, x.min(), x.max())

    s = np.sort(x)
    k = _best_split(s)
    split_low, split_high = s[:k].mean(), s[k:].mean()
    if _sse(x, split_low, split_high) < _sse(x, c_low, c_high) * (1 - 1e-12):
        c_low, c_high = _lloyd(x, split_low, split_high)
    return float(c_low), float(c_high)


def cluster_threshold(roi_intensities: Sequence[float]) -> float:
    """Midpoint of the two cluster centers"""
    c_low, c_high = two_means(roi_intensities)
    return (c_low + c_high) / 2.0


def build_nodule_mask(roi: NoduleROI, threshold: float) -> np.ndarray:
    """ROI pixels with intensity >= threshold"""
    if not np.isfinite(threshold):
        raise ContractError(f"threshold must be finite, got {threshold}")
    mask = np.zeros(roi.shape, dtype=bool)
    keep = roi.intensities >= threshold
    mask[roi.rows[keep], roi.cols[keep]] = True
    return mask


def build_body_mask(slice8: np.ndarray, threshold: int = 127) -> np.ndarray:
    """
    Body silhouette of an 8-bit slice

    Threshold at >= threshold, fill holes not reachable from the border
    (4-connected background), keep the largest 8-connected component.
    """
    slice8 = np.asarray(slice8)
    if slice8.ndim != 2:
        raise ContractError(f"body mask needs a 2D slice, got shape {slice8.shape}")
    if slice8.size and (slice8.min() < 0 or slice8.max() > 255):
        raise ContractError("body mask input must be 8-bit valued")

    foreground = slice8 >= threshold
    if not foreground.any():
        raise EmptyBodyError(f"no pixel >= {threshold}")

    filled = ndimage.binary_fill_holes(foreground)
    labeled, count = ndimage.label(filled, structure=FOREGROUND_STRUCTURE)
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0
    return labeled == int(np.argmax(sizes))


def compose_semantic_mask(body: np.ndarray, left_lung: np.ndarray, right_lung: np.ndarray,
                          trachea: np.ndarray, nodule: np.ndarray) -> SemanticLabelMap:
    """Paint body, left lung, right lung, trachea, nodule; later layers win"""
    layers = ((BODY, body), (LEFT_LUNG, left_lung), (RIGHT_LUNG, right_lung),
              (TRACHEA, trachea), (NODULE, nodule))
    shape = np.shape(body)
    for label, mask in layers:
        if np.shape(mask) != shape:
            raise ContractError(f"{LABEL_NAMES[label]} mask shape {np.shape(mask)} != {shape}")

    labels = np.full(shape, BACKGROUND, dtype=np.uint8)
    for label, mask in layers:
        labels[np.asarray(mask, dtype=bool)] = label
    return SemanticLabelMap(labels)


def slice_contains_lung(label_map: SemanticLabelMap) -> bool:
    return bool(np.any((label_map.labels == LEFT_LUNG) | (label_map.labels == RIGHT_LUNG)))


def nodule_slice_range(volume: CTVolume, ann: NoduleAnnotation) -> range:
    """Slice indices whose plane intersects the annotation sphere"""
    sz, oz = volume.spacing[2], volume.origin[2]
    r = ann.radius_mm
    lo = int(np.ceil((ann.center_world[2] - r - oz) / sz - 1e-9))
    hi = int(np.floor((ann.center_world[2] + r - oz) / sz + 1e-9))
    lo, hi = max(lo, 0), min(hi, volume.voxels.shape[0] - 1)
    return range(lo, hi + 1)


def build_slice_label_map(volume: CTVolume, z: int, lungs: LungStructures,
                          annotations: Sequence[NoduleAnnotation],
                          window: Tuple[float, float] = (-1000.0, 400.0),
                          body_threshold: int = 127
                          ) -> Tuple[Optional[SemanticLabelMap], List[WarningRecord]]:
    """
    Label map of slice z, or None when the slice is skipped

    Nodules are clustered on HU intensities inside the spherical crop.
    """
    warnings: List[WarningRecord] = []
    slice8 = to_uint8(window_hu(volume.voxels[z], *window))

    try:
        body = build_body_mask(slice8, body_threshold)
    except EmptyBodyError as e:
        warnings.append(WarningRecord(series_id=volume.series_id, slice_index=z,
                                      kind="empty_body", message=str(e)))
        return None, warnings

    nodule = np.zeros(slice8.shape, dtype=bool)
    for ann in annotations:
        if z not in nodule_slice_range(volume, ann):
            continue
        try:
            roi = crop_spherical_roi(volume, ann, z)
        except EmptyROIError:
            continue

        try:
            mask = build_nodule_mask(roi, cluster_threshold(roi.intensities))
        except DegenerateClusterError:
            mask = roi.disk_mask()
            warnings.append(WarningRecord(series_id=volume.series_id, slice_index=z,
                                          kind="degenerate_cluster",
                                          message=f"constant ROI of {roi.size} px, using full disk"))
        if not mask.any():
            warnings.append(WarningRecord(series_id=volume.series_id, slice_index=z,
                                          kind="nodule_mask_empty",
                                          message=f"nothing above threshold in ROI of {roi.size} px"))
        nodule |= mask

    label_map = compose_semantic_mask(body, lungs.left_lung[z], lungs.right_lung[z], lungs.trachea[z], nodule)
    return label_map, warnings


def iter_series_label_maps(volume: CTVolume, lungs: LungStructures,
                           annotations: Sequence[NoduleAnnotation],
                           window: Tuple[float, float] = (-1000.0, 400.0),
                           body_threshold: int = 127
                           ) -> Iterator[Tuple[int, Optional[SemanticLabelMap], List[WarningRecord]]]:
    """Yield (z, label map, warnings) for lung-containing slices; skipped slices yield their warnings with a None map"""
    for z in range(volume.voxels.shape[0]):
        if not (lungs.left_lung[z].any() or lungs.right_lung[z].any()):
            continue
        label_map, warnings = build_slice_label_map(volume, z, lungs, annotations, window, body_threshold)
        if label_map is not None and not slice_contains_lung(label_map):
            label_map = None
        yield z, label_map, warnings


def save_label_map(label_map: SemanticLabelMap, path: Union[str, Path]) -> Path:
    """Single-channel 8-bit PNG holding raw label IDs"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(label_map.labels.astype(np.uint8)).save(path)
    return path


def load_label_map(path: Union[str, Path]) -> SemanticLabelMap:
    path = Path(path)
    with Image.open(path) as img:
        labels = np.array(img)
    if labels.ndim != 2:
        raise DataIntegrityError(f"{path.name}: label map must be single-channel")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DataIntegrityError(f"{path.name}: label value {labels.max()} outside 0..{NUM_CLASSES - 1}")
    return SemanticLabelMap(labels.astype(np.uint8))


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """(H, W) label IDs -> (num_classes, H, W) float32 one-hot"""
    labels = np.asarray(labels)
    return (np.arange(num_classes)[:, None, None] == labels[None]).astype(np.float32)
