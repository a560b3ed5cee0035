#!/usr/bin/env python3
"""
Paired slice corpus
Patient-level splits, nodule-free subsampling, synthetic mixing and the
on-disk format (images/, masks/, manifest.csv per split)
"""

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from tqdm import tqdm

from config import PipelineConfig, derive_seed
from errors import ConfigError, ContractError, DataIntegrityError, FormatError
from ingest import (CTVolume, LungStructures, NoduleAnnotation, discover_series, group_annotations,
                    load_annotations, load_lung_segmentation, load_volume, locate_annotations, to_uint8,
                    window_hu)
from logger import RunManifest, WarningRecord
from semantic_masks import SemanticLabelMap, iter_series_label_maps, load_label_map, save_label_map

logger = logging.getLogger(__name__)

ORIGIN_TAGS = ("real", "synthetic_sdm", "synthetic_external")

MANIFEST_COLUMNS = ["patient_id", "slice_index", "image_path", "mask_path",
                    "has_nodule", "origin_tag", "source_patient_id"]

SPLITS = ("train", "test")


@dataclass
class SlicePair:
    """One image slice with its label map; image in [0, 1]"""
    image: np.ndarray
    mask: SemanticLabelMap
    patient_id: str
    slice_index: int
    origin_tag: str = "real"
    source_patient_id: Optional[str] = None

    def __post_init__(self):
        if self.origin_tag not in ORIGIN_TAGS:
            raise ContractError(f"unknown origin_tag '{self.origin_tag}'")
        if np.shape(self.image) != self.mask.shape:
            raise ContractError(f"{self.patient_id}/{self.slice_index}: image shape {np.shape(self.image)} "
                                f"!= mask shape {self.mask.shape}")
        if self.source_patient_id is None:
            self.source_patient_id = self.patient_id

    @property
    def has_nodule(self) -> bool:
        return self.mask.has_nodule

    @property
    def key(self) -> Tuple[str, int]:
        return self.patient_id, self.slice_index


@dataclass(frozen=True)
class CorpusSplit:
    train_patients: FrozenSet[str]
    test_patients: FrozenSet[str]
    seed: int

    def __post_init__(self):
        overlap = self.train_patients & self.test_patients
        if overlap:
            raise DataIntegrityError(f"patients in both train and test: {sorted(overlap)[:5]}")

    def side_of(self, patient_id: str) -> Optional[str]:
        if patient_id in self.train_patients:
            return "train"
        if patient_id in self.test_patients:
            return "test"
        return None


@dataclass
class CorpusSummary:
    nodule_slices: int = 0
    non_nodule_slices: int = 0
    skipped_slices: int = 0
    series: int = 0
    per_series: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, int]:
        return {"series": self.series, "nodule_slices": self.nodule_slices,
                "non_nodule_slices": self.non_nodule_slices, "skipped_slices": self.skipped_slices}


def split_by_patient(patients: Iterable[str], n_train: int, n_test: int, seed: int) -> CorpusSplit:
    """Seeded shuffle of the sorted patient list; first n_train to train, next n_test to test"""
    ordered = sorted(set(patients))
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"corpus: split sizes must be positive, got {n_train}/{n_test}")
    if n_train + n_test > len(ordered):
        raise ConfigError(f"corpus: need {n_train + n_test} patients for a {n_train}/{n_test} split, "
                          f"only {len(ordered)} available")

    order = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in order]
    return CorpusSplit(
        train_patients=frozenset(shuffled[:n_train]),
        test_patients=frozenset(shuffled[n_train:n_train + n_test]),
        seed=seed,
    )


def subsample_negatives(negative_slices: Sequence, keep_ratio: float = 0.25, seed: int = 0,
                        strategy: str = "random") -> list:
    """
    Keep floor(keep_ratio * N) nodule-free slices, in input order

    Args:
        negative_slices: Ordered nodule-free slices (any item type)
        keep_ratio: Fraction to keep, 0 < keep_ratio <= 1
        seed: Seed for the random strategy
        strategy: "random" (uniform without replacement) or "strided" (evenly spaced)
    """
    if not 0 < keep_ratio <= 1:
        raise ConfigError(f"corpus.keep_ratio must be in (0, 1], got {keep_ratio}")
    n = len(negative_slices)
    k = int(np.floor(keep_ratio * n + 1e-9))
    if k >= n:
        return list(negative_slices)
    if k == 0:
        return []

    if strategy == "random":
        chosen = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    elif strategy == "strided":
        chosen = np.floor(np.arange(k) * (n / k)).astype(int)
    else:
        raise ConfigError(f"corpus.negative_strategy must be random or strided, got '{strategy}'")
    return [negative_slices[i] for i in chosen]


def iter_corpus_pairs(volume: CTVolume, lungs: LungStructures, annotations: Sequence[NoduleAnnotation],
                      window: Tuple[float, float] = (-1000.0, 400.0), body_threshold: int = 127
                      ) -> Iterator[Tuple[Optional[SlicePair], List[WarningRecord]]]:
    """Lung-containing slices of one series as SlicePairs (None for skipped slices)"""
    for z, label_map, warnings in iter_series_label_maps(volume, lungs, annotations, window, body_threshold):
        if label_map is None:
            yield None, warnings
            continue
        image = window_hu(volume.voxels[z], *window)
        yield SlicePair(image=image, mask=label_map, patient_id=volume.series_id, slice_index=z), warnings


def enumerate_corpus(series: Iterable[Tuple[CTVolume, LungStructures]],
                     annotations: Dict[str, List[NoduleAnnotation]],
                     window: Tuple[float, float] = (-1000.0, 400.0), body_threshold: int = 127
                     ) -> Tuple[List[SlicePair], CorpusSummary, List[WarningRecord]]:
    """
    All lung-containing slices paired with label maps

    Returns:
        (pairs sorted by patient/slice, summary counts, warning records)
    """
    pairs: List[SlicePair] = []
    summary = CorpusSummary()
    warnings: List[WarningRecord] = []

    for volume, lungs in series:
        located, out_of_grid = locate_annotations(volume, annotations.get(volume.series_id, []))
        warnings.extend(out_of_grid)
        counts = {"nodule": 0, "non_nodule": 0}
        for pair, slice_warnings in iter_corpus_pairs(volume, lungs, located, window, body_threshold):
            warnings.extend(slice_warnings)
            if pair is None:
                summary.skipped_slices += 1
                continue
            pairs.append(pair)
            counts["nodule" if pair.has_nodule else "non_nodule"] += 1
        summary.series += 1
        summary.nodule_slices += counts["nodule"]
        summary.non_nodule_slices += counts["non_nodule"]
        summary.per_series[volume.series_id] = counts

    pairs.sort(key=lambda p: p.key)
    return pairs, summary, warnings


def mix_synthetic(train_set: Sequence[SlicePair], synthetic_pairs: Sequence[SlicePair],
                  target: str = "train") -> List[SlicePair]:
    """Append synthetic pairs to a training set; never to a test partition"""
    if target != "train":
        raise ContractError(f"synthetic slices may only be added to train, not '{target}'")
    for pair in synthetic_pairs:
        if pair.origin_tag == "real":
            raise ContractError(f"{pair.patient_id}/{pair.slice_index}: origin_tag 'real' in synthetic set")
    return list(train_set) + list(synthetic_pairs)


def mix_synthetic_manifest(train_df: pd.DataFrame, synthetic_df: pd.DataFrame,
                           target: str = "train") -> pd.DataFrame:
    """mix_synthetic over manifest rows"""
    if target != "train":
        raise ContractError(f"synthetic slices may only be added to train, not '{target}'")
    if synthetic_df.empty:
        return train_df.copy()
    if (synthetic_df["origin_tag"] == "real").any():
        raise ContractError("origin_tag 'real' in synthetic manifest")
    return pd.concat([train_df, synthetic_df], ignore_index=True)


def _slice_stem(patient_id: str, slice_index: int) -> str:
    return f"{patient_id}_{slice_index:04d}"


def save_image(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """8-bit grayscale PNG of a [0, 1] slice"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels)).save(path)
    return path


def load_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float32) / 255.0


def _manifest_frame(rows: List[Dict]) -> pd.DataFrame:
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    if df.empty:
        return df
    df["slice_index"] = df["slice_index"].astype(int)
    df["has_nodule"] = df["has_nodule"].astype(bool)
    return df.sort_values(["patient_id", "slice_index", "origin_tag"], kind="mergesort").reset_index(drop=True)


def write_corpus(pairs: Sequence[SlicePair], out_dir: Union[str, Path], split: str) -> pd.DataFrame:
    """
    Write one split: images/, masks/ and manifest.csv sorted by (patient, slice)

    Returns:
        The manifest DataFrame
    """
    split_dir = Path(out_dir) / split
    rows = []
    for pair in pairs:
        stem = _slice_stem(pair.patient_id, pair.slice_index)
        image_rel = Path("images") / f"{stem}.png"
        mask_rel = Path("masks") / f"{stem}.png"
        save_image(pair.image, split_dir / image_rel)
        save_label_map(pair.mask, split_dir / mask_rel)
        rows.append({
            "patient_id": pair.patient_id,
            "slice_index": pair.slice_index,
            "image_path": image_rel.as_posix(),
            "mask_path": mask_rel.as_posix(),
            "has_nodule": pair.has_nodule,
            "origin_tag": pair.origin_tag,
            "source_patient_id": pair.source_patient_id,
        })
    df = _manifest_frame(rows)
    write_manifest(df, split_dir)
    logger.info(f"💾 Wrote {len(df)} {split} slices to {split_dir}")
    return df


def write_manifest(df: pd.DataFrame, split_dir: Union[str, Path]) -> Path:
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    path = split_dir / "manifest.csv"
    df.to_csv(path, index=False, columns=MANIFEST_COLUMNS, lineterminator="\n")
    return path


def read_manifest(split_dir: Union[str, Path]) -> pd.DataFrame:
    split_dir = Path(split_dir)
    path = split_dir / "manifest.csv" if split_dir.is_dir() else split_dir
    if not path.exists():
        raise ConfigError(f"Manifest not found: {path}")
    df = pd.read_csv(path, dtype={"patient_id": str, "source_patient_id": str})
    for column in MANIFEST_COLUMNS:
        if column not in df.columns:
            raise FormatError(column, f"missing from {path}")
    bad = set(df["origin_tag"]) - set(ORIGIN_TAGS)
    if bad:
        raise DataIntegrityError(f"{path}: unknown origin_tag values {sorted(bad)}")
    df["has_nodule"] = df["has_nodule"].astype(bool)
    df["source_patient_id"] = df["source_patient_id"].fillna(df["patient_id"])
    return df


def load_slice_pairs(manifest: pd.DataFrame, root: Union[str, Path]) -> List[SlicePair]:
    """Materialize manifest rows; paths are relative to root"""
    root = Path(root)
    pairs = []
    for row in manifest.itertuples(index=False):
        mask = load_label_map(root / row.mask_path)
        if mask.has_nodule != bool(row.has_nodule):
            raise DataIntegrityError(f"{row.mask_path}: has_nodule={row.has_nodule} disagrees with mask")
        pairs.append(SlicePair(
            image=load_image(root / row.image_path),
            mask=mask,
            patient_id=str(row.patient_id),
            slice_index=int(row.slice_index),
            origin_tag=row.origin_tag,
            source_patient_id=str(row.source_patient_id),
        ))
    return pairs


def absolute_paths(manifest: pd.DataFrame, root: Union[str, Path]) -> pd.DataFrame:
    """Copy of a manifest with image/mask paths resolved against root"""
    root = Path(root)
    df = manifest.copy()
    for column in ("image_path", "mask_path"):
        df[column] = [str((root / p).resolve()) for p in df[column]]
    return df


def iter_luna_series(cfg: PipelineConfig, series_ids: Optional[Iterable[str]] = None
                     ) -> Iterator[Tuple[CTVolume, LungStructures]]:
    """Load (volume, lung structures) for every discovered series"""
    headers = discover_series(cfg.paths.data_root)
    wanted = set(series_ids) if series_ids is not None else None
    seg_dir = Path(cfg.paths.segmentation_dir)
    remap = cfg.segmentation.model_dump()
    for header in headers:
        if wanted is not None and header.stem not in wanted:
            continue
        if seg_dir.resolve() in header.resolve().parents:
            continue
        volume = load_volume(header)
        seg_path = seg_dir / f"{header.stem}.mhd"
        if not seg_path.exists():
            raise ConfigError(f"Lung segmentation missing for {header.stem}: {seg_path}")
        yield volume, load_lung_segmentation(seg_path, remap, reference=volume)


def write_slice_catalog(cfg: PipelineConfig, out_dir: Union[str, Path]) -> Tuple[pd.DataFrame, RunManifest]:
    """
    Build label maps for every lung-containing slice of the cohort

    Writes <out_dir>/catalog/{images,masks,manifest.csv}; slices are streamed to
    disk one series at a time.
    """
    catalog_dir = Path(out_dir) / "catalog"
    run = RunManifest("build-masks", cfg)
    annotations = group_annotations(load_annotations(cfg.paths.annotations_csv))
    series_ids = [p.stem for p in discover_series(cfg.paths.data_root)
                  if Path(cfg.paths.segmentation_dir).resolve() not in p.resolve().parents]

    rows: List[Dict] = []
    summary = CorpusSummary()
    window = (cfg.window.lo, cfg.window.hi)
    for volume, lungs in tqdm(iter_luna_series(cfg, series_ids), total=len(series_ids), desc="Series"):
        pairs, series_summary, warnings = enumerate_corpus([(volume, lungs)], annotations, window,
                                                           cfg.masks.body_threshold)
        run.extend(warnings)
        for pair in pairs:
            stem = _slice_stem(pair.patient_id, pair.slice_index)
            image_rel, mask_rel = f"images/{stem}.png", f"masks/{stem}.png"
            save_image(pair.image, catalog_dir / image_rel)
            save_label_map(pair.mask, catalog_dir / mask_rel)
            rows.append({"patient_id": pair.patient_id, "slice_index": pair.slice_index,
                         "image_path": image_rel, "mask_path": mask_rel, "has_nodule": pair.has_nodule,
                         "origin_tag": "real", "source_patient_id": pair.patient_id})
        summary.series += 1
        summary.nodule_slices += series_summary.nodule_slices
        summary.non_nodule_slices += series_summary.non_nodule_slices
        summary.skipped_slices += series_summary.skipped_slices

    catalog = _manifest_frame(rows)
    write_manifest(catalog, catalog_dir)
    run.counts = summary.to_dict()
    run.save(catalog_dir)
    logger.info(f"✅ Catalog: {summary.nodule_slices} nodule / {summary.non_nodule_slices} nodule-free slices "
                f"from {summary.series} series")
    return catalog, run


def build_corpus(cfg: PipelineConfig, catalog_dir: Union[str, Path], out_dir: Union[str, Path],
                 seed: int) -> Tuple[Dict[str, pd.DataFrame], RunManifest]:
    """
    Split a slice catalog by patient and subsample nodule-free slices

    Subsampling is corpus-global: floor(keep_ratio * N) of all nodule-free
    slices survive; every nodule slice is kept.
    """
    catalog_dir, out_dir = Path(catalog_dir), Path(out_dir)
    catalog = read_manifest(catalog_dir)
    if catalog.empty:
        raise ConfigError(f"Catalog {catalog_dir} has no slices")

    seeds = {"split": derive_seed(seed, "split"), "subsample": derive_seed(seed, "subsample")}
    run = RunManifest("build-corpus", cfg, seeds=seeds)

    split = split_by_patient(catalog["patient_id"].unique(), cfg.corpus.n_train, cfg.corpus.n_test,
                             seeds["split"])

    negatives = catalog[~catalog["has_nodule"]].index.tolist()
    kept_negatives = subsample_negatives(negatives, cfg.corpus.keep_ratio, seeds["subsample"],
                                         cfg.corpus.negative_strategy)
    kept = catalog.loc[sorted(catalog[catalog["has_nodule"]].index.tolist() + kept_negatives)]

    manifests: Dict[str, pd.DataFrame] = {}
    for side in SPLITS:
        patients = split.train_patients if side == "train" else split.test_patients
        rows = kept[kept["patient_id"].isin(patients)]
        split_dir = out_dir / side
        for rel in list(rows["image_path"]) + list(rows["mask_path"]):
            target = split_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(catalog_dir / rel, target)
        manifests[side] = _manifest_frame(rows.to_dict("records"))
        write_manifest(manifests[side], split_dir)

    run.counts = {
        "train_patients": len(split.train_patients),
        "test_patients": len(split.test_patients),
        "nodule_slices": int(catalog["has_nodule"].sum()),
        "non_nodule_slices": len(negatives),
        "non_nodule_kept": len(kept_negatives),
        "train_slices": len(manifests["train"]),
        "test_slices": len(manifests["test"]),
    }
    run.save(out_dir)
    logger.info(f"✅ Corpus: {run.counts['train_slices']} train / {run.counts['test_slices']} test slices")
    return manifests, run
