#!/usr/bin/env python3
"""
Experiment matrix
Patient-level k-fold runs of rows A (real only), B (external synthetic) and
C (diffusion synthetic) for both downstream tasks, rank-sum significance
and the summary report
"""

import logging
from dataclasses import dataclass
from math import comb
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata
from tqdm import tqdm

from config import PipelineConfig, derive_seed
from corpus import SPLITS, absolute_paths, load_slice_pairs, read_manifest
from downstream_eval import run_detection_task, run_localization_task, write_detections
from errors import ConfigError, ContractError, DataIntegrityError
from logger import RunManifest

logger = logging.getLogger(__name__)

EXACT_LIMIT = 20
CONTROL_ROW = "A"
ROW_LABELS = {"A": "real only", "B": "+ external synthetic", "C": "+ diffusion synthetic"}
TASK_LABELS = {"detection": "I", "localization": "II"}
DETECTION_METRICS = ["accuracy", "precision", "recall", "specificity", "f1"]
PRIMARY_METRIC = {"detection": "accuracy", "localization": "ap_50"}


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: pd.DataFrame
    test: pd.DataFrame
    test_patients: frozenset


@dataclass(frozen=True)
class SignificanceResult:
    statistic: float  # rank sum of the first sample
    p_value: float
    method: str  # exact | normal | degenerate
    # identical samples, or a rank sum sitting exactly at its null mean (p = 1)
    degenerate: bool = False


def kfold_partition(manifest: pd.DataFrame, k: int = 10, seed: int = 0) -> List[FoldSplit]:
    """
    Patient-level folds over the real rows of a manifest

    Synthetic rows only ever join train sides, and never when their
    conditioning patient is in that fold's test side.
    """
    real = manifest[manifest["origin_tag"] == "real"]
    synthetic = manifest[manifest["origin_tag"] != "real"]
    patients = sorted(real["patient_id"].unique())
    if len(patients) < k:
        raise ConfigError(f"experiments.k = {k} folds need at least {k} patients, found {len(patients)}")

    order = np.random.default_rng(seed).permutation(len(patients))
    folds = np.array_split(np.asarray(patients, dtype=object)[order], k)
    splits = []
    for i, fold_patients in enumerate(folds):
        test_patients = frozenset(str(p) for p in fold_patients)
        test = real[real["patient_id"].isin(test_patients)]
        train = pd.concat([
            real[~real["patient_id"].isin(test_patients)],
            synthetic[~synthetic["source_patient_id"].isin(test_patients)],
        ], ignore_index=True)
        splits.append(FoldSplit(fold=i, train=train.reset_index(drop=True),
                                test=test.reset_index(drop=True), test_patients=test_patients))
    return splits


def _exact_rank_sum_distribution(doubled_ranks: Sequence[int], n: int) -> Dict[int, int]:
    """Counts of subsets of size n by doubled rank sum"""
    # ways[j] maps doubled sum -> number of j-subsets
    ways: List[Dict[int, int]] = [dict() for _ in range(n + 1)]
    ways[0][0] = 1
    for r in doubled_ranks:
        for j in range(min(n, len(doubled_ranks)), 0, -1):
            prev = ways[j - 1]
            if not prev:
                continue
            cur = ways[j]
            for s, count in prev.items():
                cur[s + r] = cur.get(s + r, 0) + count
    return ways[n]


def rank_sum_test(xs: Sequence[float], ys: Sequence[float]) -> SignificanceResult:
    """
    Two-sided Wilcoxon rank-sum test with midranks for ties

    Exact null distribution when n + m <= 20, normal approximation with tie
    and continuity correction otherwise.
    """
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    n, m = xs.size, ys.size
    if n < 1 or m < 1:
        raise ContractError(f"rank-sum test needs non-empty samples, got n={n}, m={m}")
    combined = np.concatenate([xs, ys])
    ranks = rankdata(combined)
    w = float(ranks[:n].sum())
    if np.all(combined == combined[0]):
        return SignificanceResult(statistic=w, p_value=1.0, method="degenerate", degenerate=True)

    total = n + m
    if total <= EXACT_LIMIT:
        doubled = [int(round(2 * r)) for r in ranks]
        expected2 = n * (total + 1)
        observed = abs(int(round(2 * w)) - expected2)
        dist = _exact_rank_sum_distribution(doubled, n)
        extreme = sum(count for s, count in dist.items() if abs(s - expected2) >= observed)
        p = extreme / comb(total, n)
        return SignificanceResult(statistic=w, p_value=min(1.0, p), method="exact", degenerate=observed == 0)

    mean = n * (total + 1) / 2.0
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (total * (total - 1))
    var = n * m / 12.0 * ((total + 1) - tie_term)
    z = max(abs(w - mean) - 0.5, 0.0) / np.sqrt(var)
    p = float(min(1.0, 2.0 * norm.sf(z)))
    return SignificanceResult(statistic=w, p_value=p, method="normal", degenerate=bool(w == mean))


def _synthetic_sources(cfg: PipelineConfig) -> Dict[str, Optional[Path]]:
    return {"A": None, "B": cfg.experiments.synthetic_external, "C": cfg.experiments.synthetic_sdm}


def check_artifacts(cfg: PipelineConfig) -> None:
    """Raise ConfigError listing every missing corpus split or synthetic set"""
    missing = []
    corpus_dir = Path(cfg.experiments.corpus_dir)
    for split in SPLITS:
        if not (corpus_dir / split / "manifest.csv").exists():
            missing.append(f"corpus split {corpus_dir / split}")
    sources = _synthetic_sources(cfg)
    for row in cfg.experiments.rows:
        if row == CONTROL_ROW:
            continue
        path = sources[row]
        key = "experiments.synthetic_external" if row == "B" else "experiments.synthetic_sdm"
        if path is None:
            missing.append(f"row {row}: {key} is not set")
        elif not (Path(path) / "manifest.csv").exists():
            missing.append(f"row {row}: synthetic set {path} ({key})")
    if missing:
        raise ConfigError("missing artifacts: " + "; ".join(missing))


def load_real_cohort(corpus_dir: Union[str, Path]) -> pd.DataFrame:
    """train + test manifests of a corpus with absolute paths"""
    corpus_dir = Path(corpus_dir)
    frames = [absolute_paths(read_manifest(corpus_dir / split), corpus_dir / split) for split in SPLITS]
    cohort = pd.concat(frames, ignore_index=True)
    synthetic = cohort[cohort["origin_tag"] != "real"]
    if not synthetic.empty:
        raise DataIntegrityError(f"{corpus_dir}: real corpus contains {len(synthetic)} synthetic rows")
    return cohort


def load_synthetic_set(path: Union[str, Path]) -> pd.DataFrame:
    df = absolute_paths(read_manifest(path), path)
    if (df["origin_tag"] == "real").any():
        raise ContractError(f"{path}: synthetic set contains rows tagged 'real'")
    return df


def _fold_dir(out_dir: Path, row: str, fold: int) -> Path:
    return out_dir / "folds" / row / f"fold_{fold:02d}"


def run_experiment(cfg: PipelineConfig, seed: int, device=None) -> pd.DataFrame:
    """
    Run every (row, fold, task) cell of the matrix and write the report

    Rows share fold assignments and per-fold training seeds, so rows differ
    only in the synthetic slices added to train.

    Returns:
        Per-fold results (one row per row/fold/task)
    """
    check_artifacts(cfg)
    exp = cfg.experiments
    out_dir = Path(exp.out_dir)
    seeds = {"folds": derive_seed(seed, "folds")}
    run = RunManifest("run-matrix", cfg, seeds={"root": seed, **seeds})

    real = load_real_cohort(exp.corpus_dir)
    sources = _synthetic_sources(cfg)
    records: List[Dict] = []

    for row in exp.rows:
        manifest = real if sources[row] is None else pd.concat(
            [real, load_synthetic_set(sources[row])], ignore_index=True)
        folds = kfold_partition(manifest, exp.k, seeds["folds"])
        for split in tqdm(folds, desc=f"Row {row}", leave=False):
            fold_dir = _fold_dir(out_dir, row, split.fold)
            fold_dir.mkdir(parents=True, exist_ok=True)
            split.train.to_csv(fold_dir / "train.csv", index=False)
            split.test.to_csv(fold_dir / "test.csv", index=False)
            if (split.test["origin_tag"] != "real").any():
                raise DataIntegrityError(f"row {row} fold {split.fold}: synthetic slice in test partition")

            train_pairs = load_slice_pairs(split.train, Path("."))
            test_pairs = load_slice_pairs(split.test, Path("."))
            for task in exp.tasks:
                task_seed = derive_seed(seed, f"fold-{split.fold}-{task}")
                if task == "detection":
                    metrics = run_detection_task(train_pairs, test_pairs, cfg.detection, task_seed, device)
                else:
                    metrics, detections = run_localization_task(train_pairs, test_pairs, cfg.localization,
                                                                task_seed, device)
                    write_detections(detections, fold_dir / "detections.csv")
                record = {"row": row, "fold": split.fold, "task": task, **metrics}
                pd.DataFrame([record]).to_csv(fold_dir / f"results_{task}.csv", index=False)
                records.append(record)
                logger.info(f"📈 row {row} fold {split.fold} {task}: "
                            f"{PRIMARY_METRIC[task]}={metrics.get(PRIMARY_METRIC[task])}")

    results = pd.DataFrame(records)
    results.to_csv(out_dir / "fold_results.csv", index=False)
    audit = audit_fold_manifests(out_dir)
    build_report(out_dir)
    run.counts = {"cells": len(records), **audit}
    run.save(out_dir)
    return results


def audit_fold_manifests(out_dir: Union[str, Path]) -> Dict[str, int]:
    """
    Leakage audit over every persisted fold manifest

    Raises:
        DataIntegrityError: synthetic rows in a test side, or a patient on both sides
    """
    out_dir = Path(out_dir)
    test_files = sorted((out_dir / "folds").glob("*/fold_*/test.csv"))
    if not test_files:
        raise ConfigError(f"no fold manifests under {out_dir / 'folds'}")
    for test_path in test_files:
        test = pd.read_csv(test_path, dtype={"patient_id": str, "source_patient_id": str})
        train = pd.read_csv(test_path.with_name("train.csv"), dtype={"patient_id": str, "source_patient_id": str})
        where = f"{test_path.parent.parent.name}/{test_path.parent.name}"
        if (test["origin_tag"] != "real").any():
            raise DataIntegrityError(f"{where}: {int((test['origin_tag'] != 'real').sum())} synthetic rows in test")
        test_patients = set(test["patient_id"])
        overlap = test_patients & (set(train["patient_id"]) | set(train["source_patient_id"].dropna()))
        if overlap:
            raise DataIntegrityError(f"{where}: patients on both sides: {sorted(overlap)[:5]}")
    logger.info(f"🔍 Audit passed for {len(test_files)} fold manifests")
    return {"audited_folds": len(test_files)}


def _metric_columns(frame: pd.DataFrame, task: str) -> List[str]:
    if task == "detection":
        return [c for c in DETECTION_METRICS if c in frame.columns]
    ap = sorted(c for c in frame.columns if c.startswith("ap_"))
    ar = sorted(c for c in frame.columns if c.startswith("ar_"))
    return ap + ar


def _fmt(mean: float, std: float) -> str:
    if np.isnan(mean):
        return "n/a"
    return f"{mean:.2f}±{std:.2f}" if not np.isnan(std) else f"{mean:.2f}"


def build_report(out_dir: Union[str, Path]) -> pd.DataFrame:
    """
    Summary table from the per-fold result files only

    Writes summary.csv (long form), table.csv (one line per task/row) and
    report.txt. Values are percentages; deltas are percentage points vs row A.
    """
    out_dir = Path(out_dir)
    files = sorted((out_dir / "folds").glob("*/fold_*/results_*.csv"))
    if not files:
        raise ConfigError(f"no fold results under {out_dir / 'folds'}")
    results = pd.concat([pd.read_csv(f) for f in files], ignore_index=True)

    long_rows, table_rows = [], []
    for task in [t for t in TASK_LABELS if t in set(results["task"])]:
        task_frame = results[results["task"] == task].dropna(axis=1, how="all")
        metrics = _metric_columns(task_frame, task)
        primary = PRIMARY_METRIC[task]
        control = task_frame[task_frame["row"] == CONTROL_ROW].sort_values("fold")
        for row in sorted(task_frame["row"].unique()):
            frame = task_frame[task_frame["row"] == row].sort_values("fold")
            line = {"task": TASK_LABELS[task], "row": row, "setting": ROW_LABELS.get(row, row)}
            for metric in metrics:
                values = frame[metric].astype(float).dropna() * 100.0
                mean = float(values.mean()) if len(values) else float("nan")
                std = float(values.std(ddof=1)) if len(values) > 1 else float("nan")
                long_rows.append({"task": task, "row": row, "metric": metric, "mean_pct": mean,
                                  "std_pct": std, "n_folds": len(values)})
                line[metric] = _fmt(mean, std)

            if row == CONTROL_ROW or control.empty or primary not in frame.columns:
                line["p_value"], line["delta_pp"] = "-", "-"
            else:
                treated = frame[primary].astype(float).dropna().to_numpy()
                base = control[primary].astype(float).dropna().to_numpy()
                sig = rank_sum_test(base, treated)
                line["p_value"] = f"{sig.p_value:.3g}"
                line["delta_pp"] = f"{(treated.mean() - base.mean()) * 100.0:+.2f}"
            table_rows.append(line)

    summary = pd.DataFrame(long_rows)
    summary.to_csv(out_dir / "summary.csv", index=False)
    table = pd.DataFrame(table_rows)
    table.to_csv(out_dir / "table.csv", index=False)

    with open(out_dir / "report.txt", "w", encoding="utf-8") as f:
        for task_label, group in table.groupby("task", sort=False):
            task = next(t for t, label in TASK_LABELS.items() if label == task_label)
            f.write(f"{task_label}: {task} (%, mean±std over folds)\n")
            f.write(group.drop(columns=["task"]).to_string(index=False))
            f.write(f"\n  p-value and delta on {PRIMARY_METRIC[task]} vs row {CONTROL_ROW}\n\n")
        f.write("p-values: two-sided Wilcoxon rank-sum over per-fold values vs row A "
                f"(exact when n+m <= {EXACT_LIMIT}, normal approximation otherwise).\n")
        f.write("Deltas in percentage points vs row A.\n")
    logger.info(f"📄 Report written to {out_dir / 'report.txt'}")
    return table
