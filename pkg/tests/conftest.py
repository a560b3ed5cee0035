"""Shared fixtures: MetaImage writers, phantom cohorts, toy configs"""

from pathlib import Path

import numpy as np
import pytest
import SimpleITK as sitk

import logger as pipeline_logger
from config import load_config
from corpus import SlicePair
from phantoms import phantom_label_maps, write_phantom_cohort
from semantic_masks import SemanticLabelMap

REPO_ROOT = Path(__file__).resolve().parent.parent
TOY_CONFIG = REPO_ROOT / "configs" / "toy.toml"


@pytest.fixture(autouse=True)
def isolated_log_dir(tmp_path, monkeypatch):
    """Keep pipeline.log out of the working tree"""
    for var in ("LUNGSYN_DATA_ROOT", "LUNGSYN_ANNOTATIONS", "LUNGSYN_SEGMENTATION_DIR",
                "LUNGSYN_OUTPUT_DIR", "LUNGSYN_LOG_DIR", "LUNGSYN_DEVICE"):
        monkeypatch.delenv(var, raising=False)
    pipeline_logger.set_log_dir(tmp_path / "logs")
    yield
    pipeline_logger.set_log_dir(None)


def write_mhd(path: Path, array_zyx: np.ndarray, spacing=(1.0, 1.0, 2.0), origin=(0.0, 0.0, 0.0)) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    image = sitk.GetImageFromArray(array_zyx)
    image.SetSpacing(tuple(float(s) for s in spacing))
    image.SetOrigin(tuple(float(o) for o in origin))
    sitk.WriteImage(image, str(path), False)
    return path


@pytest.fixture
def mhd_writer():
    return write_mhd


@pytest.fixture
def phantom_cohort(tmp_path):
    return write_phantom_cohort(tmp_path / "luna", n_patients=3, seed=0)


def toy_overrides(cohort, out_dir: Path):
    return [
        f'paths.data_root="{cohort["data_root"]}"',
        f'paths.annotations_csv="{cohort["annotations_csv"]}"',
        f'paths.segmentation_dir="{cohort["segmentation_dir"]}"',
        f'paths.output_dir="{out_dir}"',
        f'paths.log_dir="{out_dir / "logs"}"',
        f'experiments.corpus_dir="{out_dir / "corpus"}"',
        f'experiments.synthetic_external="{out_dir / "synthetic_external"}"',
        f'experiments.synthetic_sdm="{out_dir / "synthetic_sdm"}"',
        f'experiments.out_dir="{out_dir / "experiments"}"',
    ]


@pytest.fixture
def toy_config(phantom_cohort, tmp_path):
    return load_config(TOY_CONFIG, toy_overrides(phantom_cohort, tmp_path / "out") + ["seed=7"])


@pytest.fixture
def toy_pairs():
    """Eight 32x32 slice pairs, every other one with a nodule"""
    pairs = []
    for i, labels in enumerate(phantom_label_maps(8, size=32, seed=3)):
        image = np.where(labels == 0, 0.0, 0.55).astype(np.float32)
        image[(labels == 1) | (labels == 2)] = 0.15
        image[labels == 5] = 0.8
        pairs.append(SlicePair(image=image, mask=SemanticLabelMap(labels), patient_id=f"p{i % 4}",
                               slice_index=i))
    return pairs
