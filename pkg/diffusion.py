#!/usr/bin/env python3
"""
Mask-conditioned denoising diffusion
Noise schedule, forward process, training objective, classifier-free guided
ancestral sampling, training loop and checkpoints
"""

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from torchvision.utils import save_image as save_grid
from tqdm import tqdm

from config import SOFTWARE_VERSION, DiffusionTrainConfig, PipelineConfig, derive_seed
from corpus import SlicePair, read_manifest, save_image, write_manifest
from errors import ConfigError, ContractError, NumericalError
from ingest import WindowedSlice
from logger import RunManifest
from semantic_masks import SemanticLabelMap, load_label_map, one_hot, save_label_map
from sdm_network import SemanticDenoiser, build_denoiser

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """betas[i] is beta at t = i + 1; alpha_bar at t = 0 is 1"""
    betas: np.ndarray
    shape: str = "linear"

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    @property
    def posterior_variance(self) -> np.ndarray:
        """beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t = 1"""
        ab = self.alpha_bars
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        return self.betas * (1.0 - ab_prev) / (1.0 - ab)

    def to_dict(self) -> Dict:
        return {"T": self.T, "shape": self.shape, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "NoiseSchedule":
        return cls(betas=np.asarray(data["betas"], dtype=np.float64), shape=data.get("shape", "linear"))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, shape: str = "linear") -> NoiseSchedule:
    """
    Build a noise schedule

    The cosine shape derives betas from a squared-cosine alpha_bar curve and
    ignores beta_start/beta_end beyond validating them.
    """
    if T < 1:
        raise ConfigError(f"diffusion.timesteps must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"diffusion betas need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")

    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif shape == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ConfigError(f"diffusion.schedule must be linear or cosine, got '{shape}'")

    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ConfigError("diffusion schedule produced betas outside (0, 1)")
    sched = NoiseSchedule(betas=betas, shape=shape)
    if sched.alpha_bars[-1] >= 0.05:
        logger.warning(f"⚠️ alpha_bar at T={T} is {sched.alpha_bars[-1]:.4f}; samples will not start from near-pure noise")
    return sched


def _as_t_tensor(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long)
        return t.expand(batch) if t.dim() == 0 else t
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def _gather(values: np.ndarray, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """values[t - 1] broadcast against x"""
    table = torch.as_tensor(values, dtype=x.dtype, device=x.device)
    return table[t - 1].reshape(-1, *([1] * (x.dim() - 1)))


def _check_t(t: torch.Tensor, sched: NoiseSchedule):
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > sched.T):
        raise ContractError(f"timestep must lie in [1, {sched.T}], got range [{int(t.min())}, {int(t.max())}]")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps"""
    if x0.shape != eps.shape:
        raise ContractError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t = _as_t_tensor(t, x0.shape[0], x0.device)
    _check_t(t, sched)
    ab = _gather(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def forward_step(x_prev: torch.Tensor, t, z: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One noising step: x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z"""
    t = _as_t_tensor(t, x_prev.shape[0], x_prev.device)
    _check_t(t, sched)
    beta = _gather(sched.betas, t, x_prev)
    return (1.0 - beta).sqrt() * x_prev + beta.sqrt() * z


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ContractError(f"guidance inputs differ in shape: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_uncond + s * (eps_cond - eps_uncond)


def _posterior_mean_coefs(sched: NoiseSchedule) -> Tuple[np.ndarray, np.ndarray]:
    ab = sched.alpha_bars
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    coef_x0 = sched.betas * np.sqrt(ab_prev) / (1.0 - ab)
    coef_xt = (1.0 - ab_prev) * np.sqrt(sched.alphas) / (1.0 - ab)
    return coef_x0, coef_xt


def _posterior_log_variance(sched: NoiseSchedule) -> np.ndarray:
    var = sched.posterior_variance
    # t = 1 has zero variance; borrow t = 2 for the log
    floor = var[1] if var.size > 1 else sched.betas[0]
    return np.log(np.concatenate([[floor], var[1:]]))


def _model_log_variance(v: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    frac = (v + 1.0) / 2.0
    min_log = _gather(_posterior_log_variance(sched), t, v)
    max_log = _gather(np.log(sched.betas), t, v)
    return frac * max_log + (1.0 - frac) * min_log


def _normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def _gaussian_nll(x, mean, logvar) -> torch.Tensor:
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def _vlb_terms(x0, x_t, t, eps_pred, v, sched: NoiseSchedule) -> torch.Tensor:
    """Per-sample variational bound term: KL for t > 1, Gaussian NLL of x0 at t = 1"""
    coef_x0, coef_xt = _posterior_mean_coefs(sched)
    true_mean = _gather(coef_x0, t, x0) * x0 + _gather(coef_xt, t, x0) * x_t
    true_logvar = _gather(_posterior_log_variance(sched), t, x0)

    ab = _gather(sched.alpha_bars, t, x0)
    x0_pred = ((x_t - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()).clamp(-1.0, 1.0)
    model_mean = _gather(coef_x0, t, x0) * x0_pred + _gather(coef_xt, t, x0) * x_t
    model_logvar = _model_log_variance(v, t, sched)

    kl = _normal_kl(true_mean, true_logvar, model_mean, model_logvar).flatten(1).mean(1)
    nll = _gaussian_nll(x0, model_mean, model_logvar).flatten(1).mean(1)
    return torch.where(t == 1, nll, kl)


def training_loss(denoiser, x0: torch.Tensor, cond: torch.Tensor, sched: NoiseSchedule,
                  generator: Optional[torch.Generator] = None, p_drop: float = 0.0,
                  t: Optional[torch.Tensor] = None, eps: Optional[torch.Tensor] = None,
                  learned_variance: bool = False, vlb_weight: float = 0.001) -> torch.Tensor:
    """
    Noise-prediction MSE with classifier-free condition dropping

    Args:
        x0: (B, 1, H, W) images in [-1, 1]
        cond: (B, C, H, W) one-hot label maps
        generator: draws t, eps and the drop decisions
        t, eps: fixed draws instead of sampling
        learned_variance: add vlb_weight x variational bound term
    """
    if x0.dim() != 4 or cond.dim() != 4 or x0.shape[0] != cond.shape[0] or x0.shape[2:] != cond.shape[2:]:
        raise ContractError(f"x0 {tuple(x0.shape)} and condition {tuple(cond.shape)} must be (B, C, H, W) "
                            f"with matching batch and spatial size")
    batch, device = x0.shape[0], x0.device

    if t is None:
        t = torch.randint(1, sched.T + 1, (batch,), generator=generator).to(device)
    t = _as_t_tensor(t, batch, device)
    _check_t(t, sched)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator).to(device)

    if p_drop > 0:
        drop = (torch.rand(batch, generator=generator) < p_drop).to(device)
        cond = torch.where(drop[:, None, None, None], torch.zeros_like(cond), cond)

    x_t = forward_diffuse(x0, t, eps, sched)
    out = denoiser(x_t, t, cond)
    channels = x0.shape[1]
    if learned_variance:
        if out.shape[1] != 2 * channels:
            raise ContractError("learned variance needs a denoiser with 2x output channels")
        eps_pred, v = out[:, :channels], out[:, channels:]
    else:
        eps_pred = out
    if eps_pred.shape != eps.shape:
        raise ContractError(f"denoiser output {tuple(eps_pred.shape)} != noise shape {tuple(eps.shape)}")

    loss = F.mse_loss(eps_pred, eps)
    if learned_variance:
        loss = loss + vlb_weight * _vlb_terms(x0, x_t, t, eps_pred.detach(), v, sched).mean()
    return loss


def _guided_eps(denoiser, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, s: float
                ) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Guided noise and (learned) variance output for one reverse step"""
    channels = x.shape[1]
    out = denoiser(torch.cat([x, x]), torch.cat([t, t]), torch.cat([cond, torch.zeros_like(cond)]))
    out_cond, out_uncond = out.chunk(2)
    eps = guided_noise(out_cond[:, :channels], out_uncond[:, :channels], s)
    v = out_cond[:, channels:] if out.shape[1] > channels else None
    return eps, v


@torch.no_grad()
def sample_batch(denoiser, cond: torch.Tensor, sched: NoiseSchedule, s: float = 1.5,
                 seeds: Optional[Sequence[int]] = None, device=None) -> torch.Tensor:
    """
    Guided ancestral sampling for a batch of conditions

    Every sample draws from its own CPU generator, so a sample depends only on
    (weights, condition, seed, s).

    Args:
        cond: (B, C, H, W) one-hot label maps
        seeds: one seed per sample (default 0..B-1)

    Returns:
        (B, 1, H, W) images in [0, 1]
    """
    device = device or cond.device
    batch, _, height, width = cond.shape
    seeds = list(seeds) if seeds is not None else list(range(batch))
    if len(seeds) != batch:
        raise ContractError(f"{len(seeds)} seeds for {batch} conditions")
    gens = [torch.Generator().manual_seed(int(seed)) for seed in seeds]

    def noise() -> torch.Tensor:
        return torch.cat([torch.randn((1, 1, height, width), generator=g) for g in gens]).to(device)

    cond = cond.to(device)
    was_training = denoiser.training
    denoiser.eval()
    coef_x0, coef_xt = _posterior_mean_coefs(sched)
    post_var = sched.posterior_variance

    x = noise()
    for step in range(sched.T, 0, -1):
        t = torch.full((batch,), step, dtype=torch.long, device=device)
        eps, v = _guided_eps(denoiser, x, t, cond, s)
        ab = sched.alpha_bar(step)
        if step == 1:
            # final step is noise-free: the posterior mean collapses to x0
            x = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        else:
            mean = (x - sched.betas[step - 1] / math.sqrt(1.0 - ab) * eps) / math.sqrt(sched.alphas[step - 1])
            if v is not None:
                std = torch.exp(0.5 * _model_log_variance(v, t, sched))
            else:
                std = math.sqrt(post_var[step - 1])
            x = mean + std * noise()
        if not torch.isfinite(x).all():
            denoiser.train(was_training)
            raise NumericalError("non-finite values during sampling", step=step,
                                 diagnostics={"seeds": seeds[:8]})
    denoiser.train(was_training)
    return (x.clamp(-1.0, 1.0) + 1.0) / 2.0


def label_map_condition(label_map: Union[SemanticLabelMap, np.ndarray], image_size: Optional[int] = None
                        ) -> torch.Tensor:
    """(1, C, H, W) one-hot condition, optionally resized with nearest neighbour"""
    labels = label_map.labels if isinstance(label_map, SemanticLabelMap) else np.asarray(label_map)
    cond = torch.from_numpy(one_hot(labels)).unsqueeze(0)
    if image_size is not None and cond.shape[-1] != image_size:
        cond = F.interpolate(cond, size=(image_size, image_size), mode="nearest")
    return cond


def sample(denoiser, mask: Union[SemanticLabelMap, np.ndarray], sched: NoiseSchedule, s: float = 1.5,
           seed: int = 0, device=None, series_id: str = "synthetic", slice_index: int = 0) -> WindowedSlice:
    """Single guided sample as a [0, 1] slice"""
    cond = label_map_condition(mask)
    if device is not None:
        cond = cond.to(device)
    pixels = sample_batch(denoiser, cond, sched, s, [seed], device)[0, 0].cpu().numpy().astype(np.float64)
    return WindowedSlice(pixels=pixels, series_id=series_id, slice_index=slice_index)


class SlicePairDataset(Dataset):
    """(x0 in [-1, 1], one-hot condition) at the training resolution"""

    def __init__(self, pairs: Sequence[SlicePair], image_size: int):
        self.pairs = list(pairs)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, idx: int) -> Tuple[torch.Tensor, torch.Tensor]:
        pair = self.pairs[idx]
        x0 = torch.from_numpy(np.asarray(pair.image, dtype=np.float32))[None, None]
        if x0.shape[-1] != self.image_size or x0.shape[-2] != self.image_size:
            x0 = F.interpolate(x0, size=(self.image_size, self.image_size), mode="area")
        cond = label_map_condition(pair.mask, self.image_size)
        return x0[0] * 2.0 - 1.0, cond[0]


def save_checkpoint(path: Union[str, Path], denoiser: SemanticDenoiser, cfg: DiffusionTrainConfig,
                    sched: NoiseSchedule, step: int, seed: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "state_dict": denoiser.state_dict(),
        "config": cfg.model_dump(mode="json"),
        "schedule": sched.to_dict(),
        "step": step,
        "seed": seed,
        "software_version": SOFTWARE_VERSION,
    }, path)
    return path


def load_checkpoint(path: Union[str, Path], device=None
                    ) -> Tuple[SemanticDenoiser, NoiseSchedule, DiffusionTrainConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=device or "cpu", weights_only=False)
    cfg = DiffusionTrainConfig.model_validate(payload["config"])
    denoiser = build_denoiser(cfg)
    denoiser.load_state_dict(payload["state_dict"])
    if device is not None:
        denoiser.to(device)
    denoiser.eval()
    return denoiser, NoiseSchedule.from_dict(payload["schedule"]), cfg


def _infinite(loader: DataLoader):
    while True:
        for batch in loader:
            yield batch


def train(cfg: DiffusionTrainConfig, pairs: Sequence[SlicePair], out_dir: Union[str, Path], seed: int,
          device=None, pipeline_cfg: Optional[PipelineConfig] = None) -> Dict[str, Path]:
    """
    Train the denoiser on paired slices

    Writes checkpoint.pt, loss_trace.csv (step, loss), periodic sample grids
    and intermediate checkpoints under out_dir.

    Raises:
        ConfigError: no training pairs
        NumericalError: non-finite loss (trace is written first)
    """
    if len(pairs) == 0:
        raise ConfigError("diffusion training needs at least one slice pair")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    device = device or torch.device("cpu")

    torch.manual_seed(seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)

    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.schedule)
    denoiser = build_denoiser(cfg).to(device)
    optimizer = torch.optim.AdamW(denoiser.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    dataset = SlicePairDataset(pairs, cfg.image_size)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, drop_last=False,
                        num_workers=cfg.num_workers,
                        generator=torch.Generator().manual_seed(derive_seed(seed, "diffusion-loader")))
    batches = _infinite(loader)
    noise_gen = torch.Generator().manual_seed(derive_seed(seed, "diffusion-noise"))

    preview = torch.stack([dataset[i][1] for i in range(min(4, len(dataset)))])
    trace: List[Dict] = []
    trace_path = out_dir / "loss_trace.csv"
    run = RunManifest("train-diffusion", pipeline_cfg or cfg, seeds={"root": seed})

    denoiser.train()
    progress = tqdm(range(1, cfg.total_steps + 1), desc="Diffusion", leave=False)
    for step in progress:
        x0, cond = next(batches)
        loss = training_loss(denoiser, x0.to(device), cond.to(device), sched, noise_gen, cfg.p_drop,
                             learned_variance=cfg.learned_variance, vlb_weight=cfg.vlb_weight)
        value = float(loss.detach())
        trace.append({"step": step, "loss": value})
        if not math.isfinite(value):
            pd.DataFrame(trace).to_csv(trace_path, index=False)
            raise NumericalError("diffusion loss diverged", step=step,
                                 diagnostics={"recent_losses": [r["loss"] for r in trace[-10:]],
                                              "trace": str(trace_path)})

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step % cfg.log_every == 0:
            recent = np.mean([r["loss"] for r in trace[-cfg.log_every:]])
            progress.set_postfix(loss=f"{recent:.4f}")
            logger.info(f"📉 step {step}/{cfg.total_steps} | loss {recent:.5f}")
        if step % cfg.sample_every == 0:
            grid = sample_batch(denoiser, preview.to(device), sched, cfg.guidance_scale,
                                [derive_seed(seed, f"preview-{i}") for i in range(preview.shape[0])], device)
            save_grid(grid, out_dir / f"samples_step{step:07d}.png", nrow=preview.shape[0])
        if step % cfg.checkpoint_every == 0 and step != cfg.total_steps:
            save_checkpoint(out_dir / f"checkpoint_step{step:07d}.pt", denoiser, cfg, sched, step, seed)

    pd.DataFrame(trace).to_csv(trace_path, index=False)
    checkpoint = save_checkpoint(out_dir / "checkpoint.pt", denoiser, cfg, sched, cfg.total_steps, seed)
    run.counts = {"pairs": len(pairs), "steps": cfg.total_steps}
    run.save(out_dir)
    logger.info(f"✅ Diffusion training finished, checkpoint at {checkpoint}")
    return {"checkpoint": checkpoint, "loss_trace": trace_path}


def select_conditioning_masks(train_manifest: pd.DataFrame, n_nodule: int = 1000, n_clean: int = 1000,
                              seed: int = 0) -> pd.DataFrame:
    """
    Real training rows whose masks condition the synthetic set

    Draws without replacement while enough rows exist, with replacement otherwise.
    """
    real = train_manifest[train_manifest["origin_tag"] == "real"]
    rng = np.random.default_rng(seed)
    chosen = []
    for has_nodule, n in ((True, n_nodule), (False, n_clean)):
        pool = real[real["has_nodule"] == has_nodule]
        if n == 0:
            continue
        if pool.empty:
            raise ConfigError(f"no real {'nodule' if has_nodule else 'nodule-free'} masks to condition on")
        replace = n > len(pool)
        if replace:
            logger.warning(f"⚠️ {n} {'nodule' if has_nodule else 'nodule-free'} samples requested from "
                           f"{len(pool)} masks, reusing masks")
        idx = rng.choice(len(pool), size=n, replace=replace)
        chosen.append(pool.iloc[idx])
    if not chosen:
        return train_manifest.iloc[0:0]
    return pd.concat(chosen, ignore_index=True)


def generate_synthetic(checkpoint: Union[str, Path], masks_dir: Union[str, Path], out_dir: Union[str, Path],
                       seed: int, n_nodule: int = 1000, n_clean: int = 1000, batch_size: int = 4,
                       guidance_scale: Optional[float] = None, origin_tag: str = "synthetic_sdm",
                       device=None, pipeline_cfg: Optional[PipelineConfig] = None) -> pd.DataFrame:
    """
    Sample one synthetic slice per selected training mask

    Output is a corpus split (images/, masks/, manifest.csv) with synthetic
    origin tags and the conditioning patient recorded as source_patient_id.
    Images are resized back to the conditioning mask's resolution.
    """
    if origin_tag == "real":
        raise ContractError("synthetic output cannot be tagged 'real'")
    masks_dir, out_dir = Path(masks_dir), Path(out_dir)
    device = device or torch.device("cpu")
    denoiser, sched, dcfg = load_checkpoint(checkpoint, device)
    s = dcfg.guidance_scale if guidance_scale is None else guidance_scale

    manifest = read_manifest(masks_dir)
    selected = select_conditioning_masks(manifest, n_nodule, n_clean, derive_seed(seed, "select-masks"))
    run = RunManifest("sample", pipeline_cfg or dcfg, seeds={"root": seed})

    rows = []
    started = time.time()
    for start in tqdm(range(0, len(selected), batch_size), desc="Sampling", leave=False):
        chunk = selected.iloc[start:start + batch_size]
        label_maps = [load_label_map(masks_dir / p) for p in chunk["mask_path"]]
        cond = torch.cat([label_map_condition(m, dcfg.image_size) for m in label_maps])
        seeds = [seed + start + i for i in range(len(chunk))]
        images = sample_batch(denoiser, cond.to(device), sched, s, seeds, device).cpu()

        for offset, (row, label_map) in enumerate(zip(chunk.itertuples(index=False), label_maps)):
            index = start + offset
            image = images[offset:offset + 1]
            if tuple(image.shape[-2:]) != label_map.shape:
                image = F.interpolate(image, size=label_map.shape, mode="bilinear", align_corners=False)
            patient_id = f"syn-{index:05d}"
            image_rel, mask_rel = f"images/{patient_id}_0000.png", f"masks/{patient_id}_0000.png"
            save_image(image[0, 0].numpy(), out_dir / image_rel)
            save_label_map(label_map, out_dir / mask_rel)
            rows.append({"patient_id": patient_id, "slice_index": 0, "image_path": image_rel,
                         "mask_path": mask_rel, "has_nodule": label_map.has_nodule, "origin_tag": origin_tag,
                         "source_patient_id": str(row.patient_id)})

    elapsed = max(time.time() - started, 1e-9)
    logger.info(f"🎨 Sampled {len(rows)} slices at {len(rows) / elapsed * 60:.1f} images/min")
    df = pd.DataFrame(rows, columns=["patient_id", "slice_index", "image_path", "mask_path",
                                     "has_nodule", "origin_tag", "source_patient_id"])
    write_manifest(df, out_dir)
    run.counts = {"synthetic": len(df), "nodule": int(df["has_nodule"].sum()) if len(df) else 0}
    run.save(out_dir)
    return df
