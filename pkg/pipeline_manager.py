#!/usr/bin/env python3
"""
Unified pipeline manager
One CLI for every stage: ingest -> build-masks -> build-corpus ->
train-diffusion -> sample -> fid -> train-task / evaluate -> run-matrix -> report
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from tqdm import tqdm

from config import PipelineConfig, derive_seed, load_config, require_seed, resolve_device
from corpus import (absolute_paths, build_corpus, load_slice_pairs, mix_synthetic_manifest, read_manifest,
                    write_slice_catalog)
from diffusion import generate_synthetic, train
from downstream_eval import (collect_patches, evaluate_classifier, evaluate_localizer, load_task_model,
                             save_task_model, train_localizer, train_patch_classifier, write_detections)
from errors import ConfigError, create_error_response
from experiments import audit_fold_manifests, build_report, run_experiment
from fid_eval import fid_report, make_embedder
from ingest import discover_series, group_annotations, load_annotations, load_volume, locate_annotations
from logger import RunManifest, WarningRecord, configure_logging, log_stage_failure, log_stage_success, set_log_dir
from phantoms import write_phantom_cohort

logger = logging.getLogger(__name__)

STOCHASTIC_STAGES = {"build-corpus", "train-diffusion", "sample", "train-task", "evaluate", "run-matrix",
                     "make-phantoms"}


class PipelineManager:
    """Runs one stage per call against a validated config"""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.output_dir = Path(cfg.paths.output_dir)
        set_log_dir(cfg.paths.log_dir)

    @property
    def device(self):
        return resolve_device(self.cfg.device)

    def ingest(self, out: Optional[Path] = None) -> Dict[str, int]:
        """Validate every series and locate its annotations; writes series.csv"""
        out = Path(out or self.output_dir / "ingest")
        run = RunManifest("ingest", self.cfg)
        annotations = group_annotations(load_annotations(self.cfg.paths.annotations_csv))
        seg_dir = Path(self.cfg.paths.segmentation_dir).resolve()
        headers = [h for h in discover_series(self.cfg.paths.data_root) if seg_dir not in h.resolve().parents]
        if not headers:
            raise ConfigError(f"No .mhd series under {self.cfg.paths.data_root}")

        rows = []
        for header in tqdm(headers, desc="Ingest", leave=False):
            volume = load_volume(header)
            inside, warnings = locate_annotations(volume, annotations.get(volume.series_id, []))
            run.extend(warnings)
            rows.append({"series_id": volume.series_id, "shape_xyz": "x".join(map(str, volume.shape_xyz)),
                         "spacing_xyz": " ".join(f"{s:.4f}" for s in volume.spacing),
                         "annotations": len(annotations.get(volume.series_id, [])), "in_grid": len(inside)})

        unknown = sorted(set(annotations) - {r["series_id"] for r in rows})
        for series_id in unknown:
            run.warn(WarningRecord(series_id=series_id, kind="annotation_unknown_series",
                                   message="annotations reference a series with no volume"))

        out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows).to_csv(out / "series.csv", index=False)
        run.counts = {"series": len(rows), "annotations": sum(r["annotations"] for r in rows),
                      "in_grid": sum(r["in_grid"] for r in rows), "unknown_series": len(unknown)}
        run.save(out)
        logger.info(f"✅ Ingest: {run.counts['series']} series, {run.counts['in_grid']} annotations in grid")
        return run.counts

    def build_masks(self, out: Optional[Path] = None) -> Dict[str, int]:
        _, run = write_slice_catalog(self.cfg, out or self.output_dir)
        return run.counts

    def build_corpus(self, catalog: Optional[Path], out: Optional[Path]) -> Dict[str, int]:
        catalog = Path(catalog or self.output_dir / "catalog")
        out = Path(out or self.cfg.experiments.corpus_dir)
        _, run = build_corpus(self.cfg, catalog, out, require_seed(self.cfg))
        return run.counts

    def train_diffusion(self, corpus_dir: Optional[Path], out: Optional[Path]) -> Dict[str, int]:
        train_dir = Path(corpus_dir or self.cfg.experiments.corpus_dir) / "train"
        pairs = load_slice_pairs(read_manifest(train_dir), train_dir)
        out = Path(out or self.output_dir / "diffusion")
        train(self.cfg.diffusion, pairs, out, require_seed(self.cfg), self.device, self.cfg)
        return {"pairs": len(pairs), "steps": self.cfg.diffusion.total_steps}

    def sample(self, checkpoint: Path, masks: Optional[Path], out: Path, origin_tag: str = "synthetic_sdm",
               n_nodule: Optional[int] = None, n_clean: Optional[int] = None) -> Dict[str, int]:
        sampling = self.cfg.sampling
        masks = Path(masks or Path(self.cfg.experiments.corpus_dir) / "train")
        df = generate_synthetic(checkpoint, masks, out, require_seed(self.cfg),
                                n_nodule=sampling.n_nodule if n_nodule is None else n_nodule,
                                n_clean=sampling.n_clean if n_clean is None else n_clean,
                                batch_size=sampling.batch_size, origin_tag=origin_tag,
                                device=self.device, pipeline_cfg=self.cfg)
        return {"synthetic": len(df)}

    def fid(self, real: Path, synth: Path, out: Optional[Path] = None) -> Dict:
        fcfg = self.cfg.fid
        embedder = make_embedder(fcfg.embedder, self.device, fcfg.batch_size, fcfg.image_size)
        out = Path(out or Path(synth) / "fid.json")
        report = fid_report(real, synth, embedder, out, params=fcfg.model_dump())
        return {r["subset"]: r["fid"] for r in report["results"]}

    def train_task(self, task: str, corpus_dir: Optional[Path], synthetic: Optional[Path],
                   out: Optional[Path]) -> Dict[str, int]:
        """Train one downstream model on the corpus train split (plus an optional synthetic set)"""
        seed = require_seed(self.cfg)
        train_dir = Path(corpus_dir or self.cfg.experiments.corpus_dir) / "train"
        manifest = absolute_paths(read_manifest(train_dir), train_dir)
        if synthetic is not None:
            manifest = mix_synthetic_manifest(manifest, absolute_paths(read_manifest(synthetic), synthetic), "train")
        pairs = load_slice_pairs(manifest, Path("."))
        out = Path(out or self.output_dir / "models" / f"{task}.pt")

        if task == "detection":
            patches = collect_patches(pairs, self.cfg.detection, derive_seed(seed, "train-patches"))
            model, trace = train_patch_classifier(patches, self.cfg.detection, derive_seed(seed, "classifier"),
                                                  self.device)
            save_task_model(out, task, model, self.cfg.detection, seed, trace)
            counts = {"pairs": len(pairs), "patches": len(patches)}
        else:
            model, trace = train_localizer(pairs, self.cfg.localization, derive_seed(seed, "localizer"), self.device)
            save_task_model(out, task, model, self.cfg.localization, seed, trace)
            counts = {"pairs": len(pairs)}
        logger.info(f"💾 {task} model saved to {out}")
        return counts

    def evaluate(self, model_path: Path, corpus_dir: Optional[Path], out: Optional[Path]) -> Dict:
        test_dir = Path(corpus_dir or self.cfg.experiments.corpus_dir) / "test"
        pairs = load_slice_pairs(read_manifest(test_dir), test_dir)
        task, model, task_cfg, _ = load_task_model(model_path, self.device)
        out = Path(out or Path(model_path).parent)
        out.mkdir(parents=True, exist_ok=True)
        if task == "detection":
            metrics = evaluate_classifier(model, pairs, task_cfg, require_seed(self.cfg), self.device)
        else:
            metrics, detections = evaluate_localizer(model, pairs, task_cfg, self.device)
            write_detections(detections, out / "detections.csv")
        pd.DataFrame([{"task": task, **metrics}]).to_csv(out / f"metrics_{task}.csv", index=False)
        return metrics

    def run_matrix(self) -> Dict[str, int]:
        results = run_experiment(self.cfg, require_seed(self.cfg), self.device)
        return {"cells": len(results)}

    def report(self, out_dir: Optional[Path] = None) -> Dict[str, int]:
        out_dir = Path(out_dir or self.cfg.experiments.out_dir)
        counts = audit_fold_manifests(out_dir)
        table = build_report(out_dir)
        print((out_dir / "report.txt").read_text(encoding="utf-8"))
        return {**counts, "table_rows": len(table)}

    def make_phantoms(self, out: Path, patients: int) -> Dict[str, int]:
        paths = write_phantom_cohort(out, n_patients=patients, seed=require_seed(self.cfg))
        return {"patients": patients, "annotations": len(pd.read_csv(paths["annotations_csv"]))}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key, e.g. --set diffusion.total_steps=2000")
    common.add_argument("--seed", type=int, help="Root seed (required for stochastic stages)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING")

    parser = argparse.ArgumentParser(prog="pipeline_manager.py",
                                     description="Lung CT semantic-diffusion synthesis and evaluation pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Validate volumes and annotations")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("build-masks", parents=[common], help="Build the slice/label-map catalog")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("build-corpus", parents=[common], help="Patient split + negative subsampling")
    p.add_argument("--catalog", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-diffusion", parents=[common], help="Train the semantic diffusion model")
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("sample", parents=[common], help="Generate a synthetic set from training masks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--masks", type=Path, help="Corpus split whose masks condition the samples")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--origin-tag", default="synthetic_sdm", choices=["synthetic_sdm", "synthetic_external"])
    p.add_argument("--n-nodule", type=int)
    p.add_argument("--n-clean", type=int)

    p = sub.add_parser("fid", parents=[common], help="FID between a real and a synthetic set")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--synth", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("train-task", parents=[common], help="Train a downstream task model")
    p.add_argument("--task", required=True, choices=["detection", "localization"])
    p.add_argument("--corpus", type=Path)
    p.add_argument("--synthetic", type=Path, help="Synthetic set added to the train split")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("evaluate", parents=[common], help="Score a task model on the test split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--corpus", type=Path)
    p.add_argument("--out", type=Path)

    sub.add_parser("run-matrix", parents=[common], help="k-fold A/B/C experiment matrix")

    p = sub.add_parser("report", parents=[common], help="Rebuild the summary report from fold files")
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("make-phantoms", parents=[common], help="Write a phantom cohort in LUNA16 layout")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patients", type=int, default=3)
    return parser


def _dispatch(manager: PipelineManager, args: argparse.Namespace) -> Dict:
    command = args.command
    if command == "ingest":
        return manager.ingest(args.out)
    if command == "build-masks":
        return manager.build_masks(args.out)
    if command == "build-corpus":
        return manager.build_corpus(args.catalog, args.out)
    if command == "train-diffusion":
        return manager.train_diffusion(args.corpus, args.out)
    if command == "sample":
        return manager.sample(args.checkpoint, args.masks, args.out, args.origin_tag, args.n_nodule, args.n_clean)
    if command == "fid":
        return manager.fid(args.real, args.synth, args.out)
    if command == "train-task":
        return manager.train_task(args.task, args.corpus, args.synthetic, args.out)
    if command == "evaluate":
        return manager.evaluate(args.model, args.corpus, args.out)
    if command == "run-matrix":
        return manager.run_matrix()
    if command == "report":
        return manager.report(args.out_dir)
    return manager.make_phantoms(args.out, args.patients)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI interface; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level)
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")

    try:
        cfg = load_config(args.config, overrides)
        manager = PipelineManager(cfg)
        if args.command in STOCHASTIC_STAGES:
            require_seed(cfg)
        counts = _dispatch(manager, args)
    except Exception as e:
        response = create_error_response(e, stage=args.command)
        if response["exit_code"] == 1:
            logger.exception(f"❌ {args.command} crashed")
        else:
            logger.error(f"❌ {response['message']}")
        log_stage_failure(args.command, response["status"], response["error"], response["exit_code"])
        print(json.dumps(response, indent=2, default=str), file=sys.stderr)
        return response["exit_code"]

    log_stage_success(args.command, seed=cfg.seed, counts=counts)
    logger.info(f"✅ {args.command} finished: {counts}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
