#!/usr/bin/env python3
"""
Frechet Inception Distance
Feature embedders, Gaussian statistics and the Frechet distance between
real and synthetic slice sets
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from corpus import load_image, read_manifest
from errors import ConfigError, ContractError, NumericalError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SQRT_RESIDUE_TOL = 1e-3


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mu.size)


class IdentityEmbedder:
    """Flattened pixels, optionally area-resized to size x size first"""

    def __init__(self, size: Optional[int] = None):
        self.size = size

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if self.size is not None and images.shape[-1] != self.size:
            t = torch.from_numpy(images).float().unsqueeze(1)
            images = F.interpolate(t, size=(self.size, self.size), mode="area").squeeze(1).double().numpy()
        return images.reshape(images.shape[0], -1)


class InceptionEmbedder:
    """2048-d Inception-v3 pool features of grayscale slices replicated to 3 channels"""

    def __init__(self, device=None, batch_size: int = 32, image_size: int = 299):
        from torchvision.models import Inception_V3_Weights, inception_v3

        self.device = device or torch.device("cpu")
        self.batch_size = batch_size
        self.image_size = image_size
        try:
            model = inception_v3(weights=Inception_V3_Weights.DEFAULT, aux_logits=True)
        except Exception as e:
            raise ConfigError(f"fid: could not load Inception-v3 weights ({e}); "
                              f"use fid.embedder = \"identity\" offline") from e
        model.fc = nn.Identity()
        self.model = model.eval().to(self.device)
        self.mean = torch.tensor(IMAGENET_MEAN, device=self.device).view(1, 3, 1, 1)
        self.std = torch.tensor(IMAGENET_STD, device=self.device).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, images: np.ndarray) -> np.ndarray:
        features = []
        for start in range(0, len(images), self.batch_size):
            batch = torch.as_tensor(np.asarray(images[start:start + self.batch_size]), dtype=torch.float32)
            batch = batch.to(self.device).unsqueeze(1).repeat(1, 3, 1, 1)
            batch = F.interpolate(batch, size=(self.image_size, self.image_size), mode="bilinear",
                                  align_corners=False)
            features.append(self.model((batch - self.mean) / self.std).cpu().double().numpy())
        return np.concatenate(features, axis=0)


def make_embedder(name: str, device=None, batch_size: int = 32, image_size: int = 299) -> Callable:
    if name == "identity":
        return IdentityEmbedder()
    if name == "inception":
        return InceptionEmbedder(device, batch_size, image_size)
    raise ConfigError(f"fid.embedder must be inception or identity, got '{name}'")


def extract_features(images: Sequence[np.ndarray], embedder: Callable) -> np.ndarray:
    """Row i is the embedding of image i"""
    if len(images) == 0:
        raise ContractError("cannot extract features from an empty image set")
    stacked = np.stack([np.asarray(img, dtype=np.float64) for img in images])
    features = np.asarray(embedder(stacked), dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(images):
        raise ContractError(f"embedder returned shape {features.shape} for {len(images)} images")
    return features


def gaussian_stats(features: np.ndarray) -> FeatureStats:
    """Column mean and unbiased covariance"""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError(f"need at least 2 feature rows, got shape {features.shape}")
    mu = features.mean(axis=0)
    sigma = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return FeatureStats(mu=mu, sigma=sigma, n=features.shape[0])


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """trace((sigma_a sigma_b)^1/2) through the symmetric form sqrt(a) b sqrt(a)"""
    w, v = scipy.linalg.eigh((sigma_a + sigma_a.T) / 2.0)
    root_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    m = root_a @ sigma_b @ root_a
    eig = scipy.linalg.eigvalsh((m + m.T) / 2.0)
    scale = max(1.0, float(np.abs(eig).max()) if eig.size else 1.0)
    residue = float(-eig.min()) / scale if eig.size else 0.0
    if residue >= SQRT_RESIDUE_TOL:
        raise NumericalError(f"matrix square root has negative residue {residue:.2e}",
                             diagnostics={"min_eigenvalue": float(eig.min()), "scale": scale})
    return float(np.sqrt(np.clip(eig, 0.0, None)).sum())


def fid(a: FeatureStats, b: FeatureStats, eps: float = 1e-6) -> float:
    """
    ||mu_a - mu_b||^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^1/2)

    On a failed square root both covariances are regularized with eps*I and
    the computation is retried once.
    """
    if a.dim != b.dim:
        raise ContractError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    for name, stats in (("a", a), ("b", b)):
        if not (np.all(np.isfinite(stats.mu)) and np.all(np.isfinite(stats.sigma))):
            raise NumericalError(f"non-finite statistics in set {name}")

    diff = float(np.sum((a.mu - b.mu) ** 2))
    try:
        tr_sqrt = _trace_sqrt_product(a.sigma, b.sigma)
    except (NumericalError, np.linalg.LinAlgError, scipy.linalg.LinAlgError) as first:
        logger.warning(f"⚠️ FID square root failed ({first}), retrying with {eps}*I")
        offset = eps * np.eye(a.dim)
        try:
            tr_sqrt = _trace_sqrt_product(a.sigma + offset, b.sigma + offset)
        except (NumericalError, np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
            raise NumericalError("FID matrix square root failed after regularization",
                                 diagnostics={"eps": eps, "dim": a.dim, "error": str(e)}) from e
    value = diff + float(np.trace(a.sigma) + np.trace(b.sigma)) - 2.0 * tr_sqrt
    return max(value, 0.0)


def _load_images(manifest: pd.DataFrame, root: Path) -> list:
    return [load_image(root / p) for p in manifest["image_path"]]


def fid_report(real_dir: Union[str, Path], synth_dir: Union[str, Path], embedder: Callable,
               out_path: Optional[Union[str, Path]] = None, params: Optional[Dict] = None) -> Dict:
    """
    FID for the nodule, non_nodule and all subsets

    Subsets with fewer than 2 images on either side are reported with
    fid = None and a reason.
    """
    real_dir, synth_dir = Path(real_dir), Path(synth_dir)
    real, synth = read_manifest(real_dir), read_manifest(synth_dir)
    subsets = {
        "nodule": (real[real["has_nodule"]], synth[synth["has_nodule"]]),
        "non_nodule": (real[~real["has_nodule"]], synth[~synth["has_nodule"]]),
        "all": (real, synth),
    }

    results = []
    for subset, (real_rows, synth_rows) in subsets.items():
        entry = {"subset": subset, "n_real": len(real_rows), "n_synth": len(synth_rows), "fid": None}
        if len(real_rows) < 2 or len(synth_rows) < 2:
            entry["reason"] = "fewer than 2 images on one side"
        else:
            stats_real = gaussian_stats(extract_features(_load_images(real_rows, real_dir), embedder))
            stats_synth = gaussian_stats(extract_features(_load_images(synth_rows, synth_dir), embedder))
            entry["fid"] = fid(stats_real, stats_synth)
            logger.info(f"📊 FID[{subset}] = {entry['fid']:.3f} ({entry['n_real']} real / {entry['n_synth']} synth)")
        results.append(entry)

    report = {
        "real": str(real_dir),
        "synth": str(synth_dir),
        "embedder": type(embedder).__name__,
        "params": params or {},
        "results": results,
    }
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, default=str)
    return report
