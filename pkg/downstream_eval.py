#!/usr/bin/env python3
"""
Downstream tasks and their metrics
(I) 32x32 patch nodule classification, (II) slice-level nodule box
localization scored by AP/AR at several IoU thresholds.
Boxes are half-open pixel boxes (x_min, y_min, x_max, y_max), x_max exclusive.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from scipy import ndimage
from torch.utils.data import DataLoader, TensorDataset

from config import DetectionConfig, LocalizationConfig, derive_seed
from corpus import SlicePair
from errors import ConfigError, ContractError, NumericalError
from semantic_masks import FOREGROUND_STRUCTURE, LEFT_LUNG, NODULE, RIGHT_LUNG, SemanticLabelMap
from task_models import build_classifier, build_localizer

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]

DETECTION_COLUMNS = ["slice_id", "x_min", "y_min", "x_max", "y_max", "confidence"]


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    label: int  # 1 nodule, 0 non-nodule
    patient_id: str
    slice_index: int
    center: Tuple[int, int]  # (row, col)


@dataclass(frozen=True)
class BoxDetection:
    box: Box
    confidence: float
    slice_id: str

    def __post_init__(self):
        x_min, y_min, x_max, y_max = self.box
        if not (x_min < x_max and y_min < y_max):
            raise ContractError(f"invalid box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class ClassifierMetrics:
    """Ratios that are undefined for the confusion matrix are None, with the reason in `undefined`"""
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    undefined: Dict[str, str] = field(default_factory=dict)

    def as_row(self) -> Dict[str, Optional[float]]:
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
                "specificity": self.specificity, "f1": self.f1}


def slice_id(patient_id: str, slice_index: int) -> str:
    return f"{patient_id}:{slice_index}"


def _crop(image: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    """size x size crop centered on (row, col), zero padded at the edges"""
    half = size // 2
    padded = np.pad(np.asarray(image, dtype=np.float32), half, mode="constant", constant_values=0.0)
    r, c = row + half, col + half
    return padded[r - half:r - half + size, c - half:c - half + size]


def _lung_mask(labels: np.ndarray) -> np.ndarray:
    return (labels == LEFT_LUNG) | (labels == RIGHT_LUNG)


def extract_patches(pair: SlicePair, negatives_per_slice: int, rng: np.random.Generator,
                    patch_size: int = 32, margin: float = 32.0) -> List[Patch]:
    """
    One positive patch per nodule component plus sampled lung negatives

    Positives are centered on the rounded centroid of each 8-connected nodule
    component. Negatives are drawn uniformly from lung pixels at least
    `margin` px (Euclidean) from every nodule pixel.
    """
    labels = pair.mask.labels
    lung = _lung_mask(labels)
    if not lung.any():
        raise ContractError(f"{pair.patient_id}/{pair.slice_index}: slice has no lung pixels")

    patches: List[Patch] = []
    nodule = labels == NODULE
    if nodule.any():
        components, count = ndimage.label(nodule, structure=FOREGROUND_STRUCTURE)
        centroids = ndimage.center_of_mass(nodule, components, range(1, count + 1))
        for cy, cx in centroids:
            row, col = int(round(cy)), int(round(cx))
            patches.append(Patch(_crop(pair.image, row, col, patch_size), 1, pair.patient_id,
                                 pair.slice_index, (row, col)))
        far = ndimage.distance_transform_edt(~nodule) >= margin
        candidates = np.argwhere(lung & far)
    else:
        candidates = np.argwhere(lung)

    if negatives_per_slice > 0 and len(candidates):
        n = min(negatives_per_slice, len(candidates))
        for idx in rng.choice(len(candidates), size=n, replace=False):
            row, col = (int(v) for v in candidates[idx])
            patches.append(Patch(_crop(pair.image, row, col, patch_size), 0, pair.patient_id,
                                 pair.slice_index, (row, col)))
    return patches


def classifier_metrics(tp: int, fp: int, fn: int, tn: int) -> ClassifierMetrics:
    if min(tp, fp, fn, tn) < 0:
        raise ContractError(f"confusion counts must be >= 0, got {(tp, fp, fn, tn)}")
    total = tp + fp + fn + tn
    if total == 0:
        raise ContractError("confusion matrix is empty")

    undefined: Dict[str, str] = {}

    def ratio(name: str, num: int, den: int, reason: str) -> Optional[float]:
        if den == 0:
            undefined[name] = reason
            return None
        return num / den

    return ClassifierMetrics(
        accuracy=(tp + tn) / total,
        precision=ratio("precision", tp, tp + fp, "no positive predictions"),
        recall=ratio("recall", tp, tp + fn, "no positive cases"),
        specificity=ratio("specificity", tn, tn + fp, "no negative cases"),
        f1=ratio("f1", 2 * tp, 2 * tp + fp + fn, "no positive cases or predictions"),
        undefined=undefined,
    )


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int]) -> Tuple[int, int, int, int]:
    y_true, y_pred = np.asarray(y_true, dtype=bool), np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"{y_true.size} labels vs {y_pred.size} predictions")
    return (int(np.sum(y_true & y_pred)), int(np.sum(~y_true & y_pred)),
            int(np.sum(y_true & ~y_pred)), int(np.sum(~y_true & ~y_pred)))


def iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_detections(detections: Sequence[BoxDetection], ground_truths: Dict[str, Sequence[Box]],
                     iou_threshold: float) -> List[Tuple[BoxDetection, bool, Optional[int]]]:
    """
    Greedy matching in descending confidence order

    Each detection takes the unmatched ground truth of its slice with the
    highest IoU, if that IoU reaches the threshold.

    Returns:
        (detection, is_true_positive, matched gt index) in confidence order
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    taken: Dict[str, set] = {}
    matches = []
    for i in order:
        det = detections[i]
        gts = ground_truths.get(det.slice_id, [])
        used = taken.setdefault(det.slice_id, set())
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if j in used:
                continue
            value = iou(det.box, gt)
            if value > best_iou:
                best, best_iou = j, value
        if best is not None and best_iou >= iou_threshold:
            used.add(best)
            matches.append((det, True, best))
        else:
            matches.append((det, False, None))
    return matches


def ap_ar_at_iou(detections: Sequence[BoxDetection], ground_truths: Dict[str, Sequence[Box]],
                 iou_threshold: float = 0.5) -> Tuple[float, float]:
    """
    101-point interpolated average precision and recall over all detections

    Raises:
        ContractError: no ground-truth boxes
    """
    n_gt = sum(len(v) for v in ground_truths.values())
    if n_gt == 0:
        raise ContractError("AP/AR undefined without ground-truth boxes")
    matches = match_detections(detections, ground_truths, iou_threshold)
    if not matches:
        return 0.0, 0.0

    tp = np.array([is_tp for _, is_tp, _ in matches], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]

    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    interpolated = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(np.mean(interpolated)), float(cum_tp[-1] / n_gt)


def gt_boxes_from_mask(mask: SemanticLabelMap) -> List[Box]:
    """Tight half-open box of every 8-connected nodule component"""
    nodule = mask.labels == NODULE
    if not nodule.any():
        return []
    components, _ = ndimage.label(nodule, structure=FOREGROUND_STRUCTURE)
    boxes = []
    for rows, cols in ndimage.find_objects(components):
        boxes.append((float(cols.start), float(rows.start), float(cols.stop), float(rows.stop)))
    return boxes


def _check_finite(loss: torch.Tensor, step: int, task: str, trace: List[float]):
    if not math.isfinite(float(loss)):
        raise NumericalError(f"{task} training loss diverged", step=step,
                             diagnostics={"recent_losses": trace[-10:]})


def _patch_tensors(patches: Sequence[Patch]) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([p.pixels for p in patches]).astype(np.float32)).unsqueeze(1)
    y = torch.tensor([p.label for p in patches], dtype=torch.long)
    return x, y


def train_patch_classifier(patches: Sequence[Patch], cfg: DetectionConfig, seed: int,
                           device=None) -> Tuple[nn.Module, List[float]]:
    """
    Train the patch classifier

    Returns:
        (model, per-epoch mean loss)
    """
    if len(patches) == 0:
        raise ConfigError("patch classifier needs at least one training patch")
    device = device or torch.device("cpu")
    torch.manual_seed(seed)
    model = build_classifier(cfg).to(device)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    criterion = nn.CrossEntropyLoss()

    x, y = _patch_tensors(patches)
    loader = DataLoader(TensorDataset(x, y), batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(derive_seed(seed, "patch-loader")))
    trace: List[float] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        for xb, yb in loader:
            step += 1
            loss = criterion(model(xb.to(device)), yb.to(device))
            _check_finite(loss, step, "patch classifier", trace)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        trace.append(float(np.mean(losses)))
        logger.debug(f"patch classifier epoch {epoch + 1}/{cfg.epochs} | loss {trace[-1]:.4f}")
    return model, trace


@torch.no_grad()
def predict_patches(model: nn.Module, patches: Sequence[Patch], device=None,
                    batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """(predicted labels, nodule probabilities)"""
    device = device or torch.device("cpu")
    if len(patches) == 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    model.eval()
    x, _ = _patch_tensors(patches)
    probs = []
    for start in range(0, len(x), batch_size):
        logits = model(x[start:start + batch_size].to(device))
        probs.append(torch.softmax(logits, dim=1)[:, 1].cpu().numpy())
    prob = np.concatenate(probs)
    return (prob >= 0.5).astype(int), prob


def _detector_input(pair: SlicePair) -> torch.Tensor:
    return torch.from_numpy(np.asarray(pair.image, dtype=np.float32)).unsqueeze(0).repeat(3, 1, 1)


def _detector_target(pair: SlicePair) -> Dict[str, torch.Tensor]:
    boxes = gt_boxes_from_mask(pair.mask)
    return {
        "boxes": torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
        "labels": torch.ones(len(boxes), dtype=torch.int64),
    }


def train_localizer(pairs: Sequence[SlicePair], cfg: LocalizationConfig, seed: int,
                    device=None) -> Tuple[nn.Module, List[float]]:
    """
    Train the two-stage box detector on slices

    Nodule-free slices are kept as background-only images when
    include_negatives is set.
    """
    train_pairs = [p for p in pairs if cfg.include_negatives or p.has_nodule]
    if len(train_pairs) == 0:
        raise ConfigError("localizer needs at least one training slice")
    device = device or torch.device("cpu")
    torch.manual_seed(seed)
    model = build_localizer(cfg).to(device)
    optimizer = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)

    rng = np.random.default_rng(derive_seed(seed, "localizer-order"))
    trace: List[float] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses = []
        order = rng.permutation(len(train_pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            images = [_detector_input(p).to(device) for p in batch]
            targets = [{k: v.to(device) for k, v in _detector_target(p).items()} for p in batch]
            step += 1
            loss = sum(model(images, targets).values())
            _check_finite(loss, step, "localizer", trace)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        trace.append(float(np.mean(losses)))
        logger.debug(f"localizer epoch {epoch + 1}/{cfg.epochs} | loss {trace[-1]:.4f}")
    return model, trace


@torch.no_grad()
def detect(model: nn.Module, pairs: Sequence[SlicePair], device=None, batch_size: int = 4) -> List[BoxDetection]:
    device = device or torch.device("cpu")
    model.eval()
    detections: List[BoxDetection] = []
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start:start + batch_size]
        outputs = model([_detector_input(p).to(device) for p in batch])
        for pair, out in zip(batch, outputs):
            for box, score in zip(out["boxes"].cpu().tolist(), out["scores"].cpu().tolist()):
                x_min, y_min, x_max, y_max = box
                if x_max <= x_min or y_max <= y_min:
                    continue
                detections.append(BoxDetection((x_min, y_min, x_max, y_max), float(min(max(score, 0.0), 1.0)),
                                               slice_id(pair.patient_id, pair.slice_index)))
    return detections


def write_detections(detections: Sequence[BoxDetection], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"slice_id": d.slice_id, "x_min": d.box[0], "y_min": d.box[1], "x_max": d.box[2],
             "y_max": d.box[3], "confidence": d.confidence} for d in detections]
    pd.DataFrame(rows, columns=DETECTION_COLUMNS).to_csv(path, index=False)
    return path


def read_detections(path: Union[str, Path]) -> List[BoxDetection]:
    df = pd.read_csv(path, dtype={"slice_id": str})
    return [BoxDetection((r.x_min, r.y_min, r.x_max, r.y_max), float(r.confidence), r.slice_id)
            for r in df.itertuples(index=False)]


def collect_patches(pairs: Sequence[SlicePair], cfg: DetectionConfig, seed: int) -> List[Patch]:
    rng = np.random.default_rng(seed)
    patches: List[Patch] = []
    for pair in pairs:
        patches.extend(extract_patches(pair, cfg.negatives_per_slice, rng, cfg.patch_size, cfg.negative_margin))
    return patches


def evaluate_classifier(model: nn.Module, test_pairs: Sequence[SlicePair], cfg: DetectionConfig, seed: int,
                        device=None) -> Dict[str, Optional[float]]:
    """Score a trained patch classifier on patches cut from test slices"""
    test_patches = collect_patches(test_pairs, cfg, derive_seed(seed, "test-patches"))
    predicted, _ = predict_patches(model, test_patches, device)
    tp, fp, fn, tn = confusion_counts([p.label for p in test_patches], predicted)
    metrics = classifier_metrics(tp, fp, fn, tn)
    for name, reason in metrics.undefined.items():
        logger.warning(f"⚠️ {name} undefined: {reason}")
    return {**metrics.as_row(), "tp": tp, "fp": fp, "fn": fn, "tn": tn, "n_test": len(test_patches)}


def evaluate_localizer(model: nn.Module, test_pairs: Sequence[SlicePair], cfg: LocalizationConfig,
                       device=None) -> Tuple[Dict[str, float], List[BoxDetection]]:
    """AP/AR at each configured IoU threshold, plus the raw detections"""
    detections = detect(model, list(test_pairs), device, cfg.batch_size)
    ground_truths = {slice_id(p.patient_id, p.slice_index): gt_boxes_from_mask(p.mask) for p in test_pairs}
    metrics: Dict[str, float] = {}
    for thr in cfg.iou_thresholds:
        ap, ar = ap_ar_at_iou(detections, ground_truths, thr)
        tag = int(round(thr * 100))
        metrics[f"ap_{tag}"], metrics[f"ar_{tag}"] = ap, ar
    metrics["n_test"] = len(test_pairs)
    return metrics, detections


def run_detection_task(train_pairs: Sequence[SlicePair], test_pairs: Sequence[SlicePair],
                       cfg: DetectionConfig, seed: int, device=None) -> Dict[str, Optional[float]]:
    """Train on train patches, score on test patches; returns metrics plus patch counts"""
    train_patches = collect_patches(train_pairs, cfg, derive_seed(seed, "train-patches"))
    model, _ = train_patch_classifier(train_patches, cfg, derive_seed(seed, "classifier"), device)
    metrics = evaluate_classifier(model, test_pairs, cfg, seed, device)
    return {**metrics, "n_train": len(train_patches)}


def run_localization_task(train_pairs: Sequence[SlicePair], test_pairs: Sequence[SlicePair],
                          cfg: LocalizationConfig, seed: int, device=None
                          ) -> Tuple[Dict[str, float], List[BoxDetection]]:
    """Train the localizer, detect on test slices, AP/AR at each IoU threshold"""
    model, _ = train_localizer(train_pairs, cfg, derive_seed(seed, "localizer"), device)
    metrics, detections = evaluate_localizer(model, test_pairs, cfg, device)
    return {**metrics, "n_train": len(train_pairs)}, detections


def save_task_model(path: Union[str, Path], task: str, model: nn.Module, cfg, seed: int,
                    trace: Sequence[float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"task": task, "state_dict": model.state_dict(), "config": cfg.model_dump(mode="json"),
                "seed": seed, "loss_trace": list(trace)}, path)
    return path


def load_task_model(path: Union[str, Path], device=None) -> Tuple[str, nn.Module, object, int]:
    """(task, model, task config, training seed) from a save_task_model file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Task model not found: {path}")
    payload = torch.load(path, map_location=device or "cpu", weights_only=False)
    task = payload["task"]
    if task == "detection":
        cfg = DetectionConfig.model_validate(payload["config"])
        model = build_classifier(cfg)
    elif task == "localization":
        cfg = LocalizationConfig.model_validate(payload["config"])
        model = build_localizer(cfg)
    else:
        raise ConfigError(f"{path}: unknown task '{task}'")
    model.load_state_dict(payload["state_dict"])
    model.to(device or torch.device("cpu")).eval()
    return task, model, cfg, int(payload["seed"])
