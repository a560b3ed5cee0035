#!/usr/bin/env python3
"""
Pipeline event logging and run manifests
Pipe-delimited event log for stages and slices, JSON run manifest per stage
"""
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel

from config import SOFTWARE_VERSION, config_hash

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: Optional[str] = None):
    """Configure root logging once for CLI runs"""
    level = level or os.getenv("LUNGSYN_LOG_LEVEL", "INFO")
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


_log_dir: Optional[str] = None


def set_log_dir(path) -> None:
    """Directory for pipeline.log; LUNGSYN_LOG_DIR or ./logs when unset"""
    global _log_dir
    _log_dir = str(path) if path is not None else None


def _log_file_path() -> str:
    log_dir = _log_dir or os.getenv("LUNGSYN_LOG_DIR", "logs")
    os.makedirs(log_dir, exist_ok=True)
    return os.path.join(log_dir, "pipeline.log")


def _append(log_entry: str):
    with open(_log_file_path(), "a", encoding="utf-8") as f:
        f.write(log_entry + "\n")


def log_stage_success(stage: str, seed: Optional[int] = None, outputs: Optional[str] = None,
                      counts: Optional[Dict[str, int]] = None):
    """Log a completed pipeline stage"""
    log_entry = f"{datetime.now().isoformat()} | STAGE_OK | {stage}"

    if seed is not None:
        log_entry += f" | Seed: {seed}"
    if counts:
        log_entry += " | " + " ".join(f"{k}={v}" for k, v in counts.items())
    if outputs is not None:
        log_entry += f" | Out: {outputs}"

    _append(log_entry)


def log_stage_failure(stage: str, error_type: str, error_message: str,
                      exit_code: Optional[int] = None):
    """Log a stage that stopped with an error"""
    log_entry = f"{datetime.now().isoformat()} | STAGE_FAILED | {stage} | {error_type} | {error_message}"
    if exit_code is not None:
        log_entry += f" | Exit: {exit_code}"
    _append(log_entry)


class WarningRecord(BaseModel):
    """One data-hygiene problem that did not stop the run"""
    series_id: str
    slice_index: Optional[int] = None
    kind: str
    message: str


def log_slice_warning(record: WarningRecord):
    """Log a per-slice warning (also kept in the run manifest)"""
    slice_part = f"Slice: {record.slice_index}" if record.slice_index is not None else "Slice: -"
    _append(f"{datetime.now().isoformat()} | SLICE_WARNING | {record.series_id} | {slice_part}"
            f" | {record.kind} | {record.message}")


class RunManifest:
    """Seeds, config hash, software version and warnings of one stage run"""

    def __init__(self, stage: str, cfg: Optional[BaseModel] = None, seeds: Optional[Dict[str, int]] = None):
        self.stage = stage
        self.config_hash = config_hash(cfg) if cfg is not None else None
        self.config = cfg.model_dump(mode="json") if cfg is not None else None
        self.seeds: Dict[str, int] = dict(seeds or {})
        self.warnings: List[WarningRecord] = []
        self.counts: Dict[str, Any] = {}
        self.started_at = datetime.now().isoformat()
        self.finished_at: Optional[str] = None

    def warn(self, record: WarningRecord):
        self.warnings.append(record)
        log_slice_warning(record)

    def extend(self, records: List[WarningRecord]):
        for record in records:
            self.warn(record)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "software_version": SOFTWARE_VERSION,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "counts": self.counts,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "warnings": [w.model_dump() for w in self.warnings],
            "config": self.config,
        }

    def save(self, out_dir: Path) -> Path:
        self.finished_at = datetime.now().isoformat()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"run_manifest_{self.stage}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        logging.getLogger(__name__).info(f"Run manifest saved to {path}")
        return path
