#!/usr/bin/env python3
"""
LUNA16 ingestion
MetaImage volumes, nodule annotations, companion lung segmentations,
world/voxel transforms and HU windowing
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import SimpleITK as sitk
from pydantic import BaseModel, Field

from errors import ConfigError, ContractError, DataIntegrityError, FormatError
from logger import WarningRecord

logger = logging.getLogger(__name__)

# Bytes per element for the MetaImage element types we accept
ELEMENT_SIZES = {
    "MET_CHAR": 1, "MET_UCHAR": 1,
    "MET_SHORT": 2, "MET_USHORT": 2,
    "MET_INT": 4, "MET_UINT": 4,
    "MET_FLOAT": 4, "MET_DOUBLE": 8,
}

REQUIRED_HEADER_KEYS = ("NDims", "DimSize", "ElementType", "ElementSpacing", "Offset", "ElementDataFile")

ANNOTATION_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


@dataclass(frozen=True)
class CTVolume:
    """HU grid indexed voxels[k, j, i] (z, y, x); spacing and origin in (x, y, z) mm"""
    voxels: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]
    series_id: str

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ContractError(f"{self.series_id}: volume must be a non-empty 3D grid, got {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ContractError(f"{self.series_id}: spacing must be 3 positive values, got {self.spacing}")
        if not self.series_id:
            raise ContractError("series_id must be non-empty")

    @property
    def shape_xyz(self) -> Tuple[int, int, int]:
        z, y, x = self.voxels.shape
        return x, y, z


class NoduleAnnotation(BaseModel):
    series_id: str = Field(min_length=1)
    center_world: Tuple[float, float, float]
    diameter_mm: float = Field(gt=0)

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


@dataclass(frozen=True)
class WindowedSlice:
    """Axial slice normalized to [0, 1]"""
    pixels: np.ndarray
    series_id: str
    slice_index: int
    extra: Dict[str, str] = field(default_factory=dict)


def read_metaimage_header(path: Union[str, Path]) -> Dict[str, str]:
    """Parse 'Key = Value' lines of a MetaImage header"""
    path = Path(path)
    if not path.exists():
        raise FormatError("header", f"file not found: {path}")
    header: Dict[str, str] = {}
    with open(path, "r", encoding="latin-1") as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def _parse_numbers(header: Dict[str, str], key: str, cast, count: int) -> list:
    try:
        values = [cast(v) for v in header[key].split()]
    except (KeyError, ValueError):
        raise FormatError(key, "missing or not numeric")
    if len(values) != count:
        raise FormatError(key, f"expected {count} values, got {len(values)}")
    return values


def validate_metaimage(path: Union[str, Path]) -> Dict[str, str]:
    """
    Check a MetaImage header and its raw payload before decoding

    Raises:
        FormatError: missing/corrupt header key (named)
        DataIntegrityError: raw byte count disagrees with DimSize x element size
    """
    path = Path(path)
    header = read_metaimage_header(path)
    for key in REQUIRED_HEADER_KEYS:
        if key not in header or not header[key]:
            raise FormatError(key, f"missing from {path.name}")

    if header["NDims"] != "3":
        raise FormatError("NDims", f"expected 3 dimensions, got {header['NDims']}")
    dims = _parse_numbers(header, "DimSize", int, 3)
    if any(d < 1 for d in dims):
        raise FormatError("DimSize", f"dimensions must be >= 1, got {dims}")
    spacing = _parse_numbers(header, "ElementSpacing", float, 3)
    if any(s <= 0 for s in spacing):
        raise FormatError("ElementSpacing", f"spacing must be positive, got {spacing}")
    _parse_numbers(header, "Offset", float, 3)

    element_type = header["ElementType"]
    if element_type not in ELEMENT_SIZES:
        raise FormatError("ElementType", f"unsupported element type {element_type}")

    data_file = header["ElementDataFile"]
    if data_file.upper() == "LOCAL":
        raise FormatError("ElementDataFile", "inline (LOCAL) data is not supported")
    raw_path = path.parent / data_file
    if not raw_path.exists():
        raise FormatError("ElementDataFile", f"raw data file not found: {raw_path}")

    compressed = header.get("CompressedData", "False").lower() == "true"
    if not compressed:
        expected = int(np.prod(dims)) * ELEMENT_SIZES[element_type]
        actual = raw_path.stat().st_size
        if actual != expected:
            raise DataIntegrityError(
                f"{path.name}: raw file has {actual} bytes, DimSize {dims} x {element_type} needs {expected}")
    return header


def load_volume(path_to_header: Union[str, Path]) -> CTVolume:
    """
    Load a LUNA16 MetaImage (.mhd + .raw) volume

    Args:
        path_to_header: Path to the .mhd file

    Returns:
        CTVolume with voxels in (z, y, x) order, spacing/origin in (x, y, z)
    """
    path = Path(path_to_header)
    validate_metaimage(path)

    try:
        image = sitk.ReadImage(str(path))
    except RuntimeError as e:
        raise DataIntegrityError(f"{path.name}: could not decode volume: {e}") from e

    voxels = sitk.GetArrayFromImage(image)
    voxels.setflags(write=False)
    volume = CTVolume(
        voxels=voxels,
        spacing=tuple(float(s) for s in image.GetSpacing()),
        origin=tuple(float(o) for o in image.GetOrigin()),
        series_id=path.stem,
    )
    logger.debug(f"Loaded {path.name} | shape={voxels.shape} | spacing={volume.spacing} | origin={volume.origin}")
    return volume


def world_to_voxel(p_world: Sequence[float], volume: CTVolume) -> np.ndarray:
    """Continuous (i, j, k) voxel coordinates; caller rounds as needed"""
    return (np.asarray(p_world, dtype=np.float64) - np.asarray(volume.origin)) / np.asarray(volume.spacing)


def voxel_to_world(ijk: Sequence[float], volume: CTVolume) -> np.ndarray:
    return np.asarray(ijk, dtype=np.float64) * np.asarray(volume.spacing) + np.asarray(volume.origin)


def voxel_in_grid(ijk: Sequence[float], volume: CTVolume) -> bool:
    """True when the rounded voxel index lies inside the grid"""
    idx = np.rint(np.asarray(ijk)).astype(int)
    return bool(np.all(idx >= 0) and np.all(idx < np.asarray(volume.shape_xyz)))


def window_hu(values, lo: float = -1000.0, hi: float = 400.0) -> np.ndarray:
    """Map HU to [0, 1]: clamp((v - lo) / (hi - lo), 0, 1)"""
    if lo >= hi:
        raise ConfigError(f"window: lo ({lo}) must be below hi ({hi})")
    data = values.voxels if isinstance(values, CTVolume) else values
    scaled = (np.asarray(data, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(scaled, 0.0, 1.0)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """8-bit export of [0, 1] pixels: round(v * 255)"""
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def windowed_slice(volume: CTVolume, z: int, lo: float = -1000.0, hi: float = 400.0) -> WindowedSlice:
    return WindowedSlice(pixels=window_hu(volume.voxels[z], lo, hi), series_id=volume.series_id, slice_index=z)


def load_annotations(csv_path: Union[str, Path]) -> List[NoduleAnnotation]:
    """
    Read a LUNA16 annotations CSV

    Returns:
        One NoduleAnnotation per row, in file order
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ConfigError(f"Annotations file not found: {csv_path}")
    df = pd.read_csv(csv_path)
    for column in ANNOTATION_COLUMNS:
        if column not in df.columns:
            raise FormatError(column, f"missing from {csv_path.name}")

    annotations = []
    for row_number, row in enumerate(df.itertuples(index=False), start=2):
        if not row.diameter_mm > 0:
            raise DataIntegrityError(f"{csv_path.name} line {row_number}: diameter_mm must be positive, got {row.diameter_mm}")
        annotations.append(NoduleAnnotation(
            series_id=str(row.seriesuid),
            center_world=(float(row.coordX), float(row.coordY), float(row.coordZ)),
            diameter_mm=float(row.diameter_mm),
        ))
    logger.info(f"📋 Loaded {len(annotations)} annotations from {csv_path.name}")
    return annotations


def group_annotations(annotations: Sequence[NoduleAnnotation]) -> Dict[str, List[NoduleAnnotation]]:
    grouped: Dict[str, List[NoduleAnnotation]] = {}
    for ann in annotations:
        grouped.setdefault(ann.series_id, []).append(ann)
    return grouped


def locate_annotations(volume: CTVolume, annotations: Sequence[NoduleAnnotation]
                       ) -> Tuple[List[NoduleAnnotation], List[WarningRecord]]:
    """Split annotations into in-grid ones and warning records for the rest"""
    inside, warnings = [], []
    for ann in annotations:
        ijk = world_to_voxel(ann.center_world, volume)
        if voxel_in_grid(ijk, volume):
            inside.append(ann)
        else:
            warnings.append(WarningRecord(
                series_id=volume.series_id,
                kind="annotation_out_of_grid",
                message=f"center {ann.center_world} -> voxel {np.round(ijk, 2).tolist()} outside grid {volume.shape_xyz}",
            ))
    return inside, warnings


@dataclass(frozen=True)
class LungStructures:
    """Boolean (z, y, x) volumes of the structures taken from the segmentation product"""
    left_lung: np.ndarray
    right_lung: np.ndarray
    trachea: np.ndarray


def load_lung_segmentation(path: Union[str, Path], remap: Dict[str, Sequence[int]],
                           reference: Optional[CTVolume] = None) -> LungStructures:
    """
    Load a companion lung segmentation volume and split it by label ID

    Args:
        path: .mhd of the segmentation
        remap: {"left_lung": [...], "right_lung": [...], "trachea": [...]}
        reference: CT volume the segmentation must align with
    """
    seg = load_volume(path)
    if reference is not None and seg.voxels.shape != reference.voxels.shape:
        raise DataIntegrityError(
            f"{seg.series_id}: segmentation shape {seg.voxels.shape} != CT shape {reference.voxels.shape}")
    labels = seg.voxels
    return LungStructures(
        left_lung=np.isin(labels, list(remap["left_lung"])),
        right_lung=np.isin(labels, list(remap["right_lung"])),
        trachea=np.isin(labels, list(remap["trachea"])),
    )


def discover_series(data_root: Union[str, Path]) -> List[Path]:
    """All .mhd headers under data_root, sorted by series id"""
    data_root = Path(data_root)
    if not data_root.exists():
        raise ConfigError(f"Data root not found: {data_root}")
    return sorted(data_root.rglob("*.mhd"), key=lambda p: p.stem)
