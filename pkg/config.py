#!/usr/bin/env python3
"""
Pipeline configuration
TOML file + environment (.env) + command-line overrides, validated with pydantic
"""

import hashlib
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

# Try to import python-dotenv for .env file support
try:
    from dotenv import load_dotenv
    load_dotenv()  # Load .env file if it exists
except ImportError:
    pass  # python-dotenv not installed, use system env vars only

logger = logging.getLogger(__name__)

SOFTWARE_VERSION = "1.0.0"

# Environment variable -> dotted config key
ENV_OVERRIDES = {
    "LUNGSYN_DATA_ROOT": "paths.data_root",
    "LUNGSYN_ANNOTATIONS": "paths.annotations_csv",
    "LUNGSYN_SEGMENTATION_DIR": "paths.segmentation_dir",
    "LUNGSYN_OUTPUT_DIR": "paths.output_dir",
    "LUNGSYN_LOG_DIR": "paths.log_dir",
    "LUNGSYN_DEVICE": "device",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Section):
    data_root: Path = Path("data/luna16")
    annotations_csv: Path = Path("data/luna16/annotations.csv")
    segmentation_dir: Path = Path("data/luna16/seg-lungs-LUNA16")
    output_dir: Path = Path("output")
    log_dir: Path = Path("logs")


class WindowConfig(_Section):
    lo: float = -1000.0
    hi: float = 400.0

    @model_validator(mode="after")
    def _ordered(self):
        if self.lo >= self.hi:
            raise ValueError(f"window lo ({self.lo}) must be below hi ({self.hi})")
        return self


class SegmentationConfig(_Section):
    """Label IDs of the companion lung segmentation product, per structure"""
    left_lung: List[int] = [3]
    right_lung: List[int] = [4]
    trachea: List[int] = [5]


class MaskConfig(_Section):
    body_threshold: int = Field(127, ge=0, le=255)


class CorpusConfig(_Section):
    n_train: int = Field(744, ge=1)
    n_test: int = Field(144, ge=1)
    keep_ratio: float = Field(0.25, gt=0.0, le=1.0)
    negative_strategy: Literal["random", "strided"] = "random"


class DiffusionTrainConfig(_Section):
    image_size: int = 256
    batch_size: int = Field(2, ge=1)
    total_steps: int = Field(100_000, ge=1)
    lr: float = 1e-4
    weight_decay: float = Field(0.0, ge=0.0)
    p_drop: float = Field(0.2, ge=0.0, le=1.0)
    guidance_scale: float = 1.5
    timesteps: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: Literal["linear", "cosine"] = "linear"
    learned_variance: bool = False
    vlb_weight: float = Field(0.001, ge=0.0)
    base_channels: int = Field(64, ge=8)
    channel_mults: List[int] = [1, 2, 4, 4]
    log_every: int = Field(100, ge=1)
    sample_every: int = Field(5000, ge=1)
    checkpoint_every: int = Field(10_000, ge=1)
    num_workers: int = Field(0, ge=0)
    deterministic: bool = True

    @field_validator("image_size")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v < 32 or v & (v - 1):
            raise ValueError(f"image_size must be a power of two >= 32, got {v}")
        return v

    @field_validator("lr")
    @classmethod
    def _positive_lr(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("lr must be positive")
        return v

    @model_validator(mode="after")
    def _fits_unet(self):
        if self.image_size % (2 ** (len(self.channel_mults) - 1)):
            raise ValueError("image_size must be divisible by 2**(len(channel_mults)-1)")
        return self


class SamplingConfig(_Section):
    n_nodule: int = Field(1000, ge=0)
    n_clean: int = Field(1000, ge=0)
    batch_size: int = Field(4, ge=1)


class FidConfig(_Section):
    embedder: Literal["inception", "identity"] = "inception"
    batch_size: int = Field(32, ge=1)
    image_size: int = Field(299, ge=8)


class DetectionConfig(_Section):
    backbone: Literal["se_resnet"] = "se_resnet"
    patch_size: int = 32
    negatives_per_slice: int = Field(1, ge=0)
    negative_margin: float = Field(32.0, ge=0.0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    widths: List[int] = [32, 64, 128]
    reduction: int = Field(16, ge=1)


class LocalizationConfig(_Section):
    backbone: Literal["tiny", "resnet50_fpn"] = "resnet50_fpn"
    epochs: int = Field(12, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0.0)
    iou_thresholds: List[float] = [0.5, 0.6, 0.7]
    score_threshold: float = Field(0.05, ge=0.0, le=1.0)
    include_negatives: bool = True
    image_min_size: int = Field(512, ge=16)
    image_max_size: int = Field(512, ge=16)


class ExperimentsConfig(_Section):
    k: int = Field(10, ge=2)
    rows: List[Literal["A", "B", "C"]] = ["A", "B", "C"]
    tasks: List[Literal["detection", "localization"]] = ["detection", "localization"]
    corpus_dir: Path = Path("output/corpus")
    synthetic_external: Optional[Path] = None
    synthetic_sdm: Optional[Path] = None
    out_dir: Path = Path("output/experiments")


class PipelineConfig(_Section):
    seed: Optional[int] = None
    device: str = "cpu"
    paths: PathsConfig = PathsConfig()
    window: WindowConfig = WindowConfig()
    segmentation: SegmentationConfig = SegmentationConfig()
    masks: MaskConfig = MaskConfig()
    corpus: CorpusConfig = CorpusConfig()
    diffusion: DiffusionTrainConfig = DiffusionTrainConfig()
    sampling: SamplingConfig = SamplingConfig()
    fid: FidConfig = FidConfig()
    detection: DetectionConfig = DetectionConfig()
    localization: LocalizationConfig = LocalizationConfig()
    experiments: ExperimentsConfig = ExperimentsConfig()


def parse_override_value(raw: str) -> Any:
    """Parse a --set value as a TOML literal, falling back to a plain string"""
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: '{key}' is not a section")
    node[keys[-1]] = value


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """
    Load and validate pipeline configuration

    Args:
        path: Optional TOML file; defaults apply when omitted
        overrides: "section.key=value" strings applied last

    Returns:
        Validated PipelineConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        logger.info(f"📋 Loaded config from {path}")

    for env_var, dotted in ENV_OVERRIDES.items():
        value = os.getenv(env_var)
        if value:
            _set_dotted(data, dotted, value)
            logger.info(f"🔍 {env_var} overrides {dotted}")

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Override must look like section.key=value, got '{item}'")
        dotted, raw = item.split("=", 1)
        _set_dotted(data, dotted.strip(), parse_override_value(raw.strip()))

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{key}: {first['msg']}") from e


def config_hash(cfg: BaseModel) -> str:
    """SHA-256 of the canonical JSON dump of a config model"""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(root: int, tag: str) -> int:
    """Deterministic named sub-seed from a root seed"""
    digest = hashlib.sha256(f"{root}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def require_seed(cfg: PipelineConfig) -> int:
    if cfg.seed is None:
        raise ConfigError("seed: a seed is required for stochastic stages (pass --seed)")
    return cfg.seed


def resolve_device(name: str):
    """Map 'auto' / 'cpu' / 'cuda[:n]' to a torch device"""
    import torch

    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    if name.startswith("cuda") and not torch.cuda.is_available():
        logger.warning(f"⚠️ {name} requested but CUDA is not available, using CPU")
        return torch.device("cpu")
    return torch.device(name)
