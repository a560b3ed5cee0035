import math

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn as nn

from config import DiffusionTrainConfig
from corpus import read_manifest, write_corpus
from diffusion import (NoiseSchedule, forward_diffuse, forward_step, generate_synthetic, guided_noise,
                       label_map_condition, load_checkpoint, make_schedule, sample, sample_batch,
                       save_checkpoint, select_conditioning_masks, train, training_loss)
from errors import ConfigError, ContractError, NumericalError
from phantoms import phantom_label_maps
from sdm_network import build_denoiser


def _tiny_cfg(**update) -> DiffusionTrainConfig:
    base = dict(image_size=32, batch_size=4, total_steps=4, timesteps=10, beta_start=1e-3, beta_end=0.2,
                base_channels=8, channel_mults=[1, 2], log_every=2, sample_every=1000, checkpoint_every=1000)
    base.update(update)
    return DiffusionTrainConfig(**base)


def _conditions(n=2, size=32, seed=0):
    return torch.cat([label_map_condition(m) for m in phantom_label_maps(n, size=size, seed=seed)])


def test_linear_schedule():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert sched.T == 1000
    assert sched.betas[0] == pytest.approx(1e-4) and sched.betas[-1] == pytest.approx(0.02)
    assert sched.alpha_bar(0) == 1.0
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 1e-4


def test_cosine_schedule_decreases():
    sched = make_schedule(100, shape="cosine")
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert np.all(np.diff(sched.alpha_bars) < 0)


@pytest.mark.parametrize("T, lo, hi, shape", [(0, 1e-4, 0.02, "linear"), (10, 0.0, 0.02, "linear"),
                                              (10, 0.1, 0.01, "linear"), (10, 1e-4, 0.02, "sigmoid")])
def test_schedule_rejects_bad_parameters(T, lo, hi, shape):
    with pytest.raises(ConfigError):
        make_schedule(T, lo, hi, shape)


def test_schedule_roundtrip_dict():
    sched = make_schedule(20, 1e-3, 0.1)
    again = NoiseSchedule.from_dict(sched.to_dict())
    np.testing.assert_array_equal(again.betas, sched.betas)


def test_posterior_variance_zero_at_first_step():
    sched = make_schedule(50, 1e-3, 0.1)
    assert sched.posterior_variance[0] == 0.0
    assert np.all(sched.posterior_variance[1:] < sched.betas[1:])


def test_forward_diffuse_endpoints():
    sched = make_schedule(1000, 1e-4, 0.02)
    x0 = torch.full((1, 1, 1, 1), 0.7, dtype=torch.float64)
    eps = torch.full_like(x0, -0.3)
    x1 = forward_diffuse(x0, 1, eps, sched)
    assert float(x1) == pytest.approx(math.sqrt(1 - 1e-4) * 0.7 + math.sqrt(1e-4) * -0.3)
    assert abs(float(forward_diffuse(x0, 1000, eps, sched)) + 0.3) < 0.01


def test_forward_diffuse_rejects_t_zero():
    sched = make_schedule(10, 1e-3, 0.1)
    x0 = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ContractError):
        forward_diffuse(x0, 0, torch.zeros_like(x0), sched)
    with pytest.raises(ContractError):
        forward_diffuse(x0, 1, torch.zeros(2, 1, 4, 5), sched)


def test_forward_diffuse_variance_monte_carlo():
    sched = make_schedule(1000, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(0)
    n = 100_000
    x0 = torch.full((n, 1, 1, 1), 0.4, dtype=torch.float64)
    for t in (1, 10, 100, 500, 1000):
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        xt = forward_diffuse(x0, t, eps, sched)
        expected = 1.0 - sched.alpha_bar(t)
        se = expected * math.sqrt(2.0 / (n - 1))
        assert abs(float(xt.var()) - expected) < 4 * se
        assert abs(float(xt.mean()) - math.sqrt(sched.alpha_bar(t)) * 0.4) < 4 * math.sqrt(expected / n)


def test_iterated_steps_match_closed_form():
    sched = make_schedule(8, 0.05, 0.3)
    gen = torch.Generator().manual_seed(1)
    n = 100_000
    x = torch.full((n, 1, 1, 1), -0.5, dtype=torch.float64)
    for t in range(1, 9):
        x = forward_step(x, t, torch.randn(x.shape, generator=gen, dtype=torch.float64), sched)
        var = 1.0 - sched.alpha_bar(t)
        assert abs(float(x.mean()) - math.sqrt(sched.alpha_bar(t)) * -0.5) < 4 * math.sqrt(var / n)
        assert abs(float(x.var()) - var) < 4 * var * math.sqrt(2.0 / (n - 1))


def test_guided_noise():
    cond, uncond = torch.ones(2, 1, 2, 2), torch.zeros(2, 1, 2, 2)
    assert torch.equal(guided_noise(cond, uncond, 0.0), uncond)
    assert torch.equal(guided_noise(cond, uncond, 1.0), cond)
    assert torch.allclose(guided_noise(cond, uncond, 1.5), torch.full((2, 1, 2, 2), 1.5))


def test_denoiser_output_shape():
    net = build_denoiser(_tiny_cfg())
    cond = _conditions()
    out = net(torch.randn(2, 1, 32, 32), torch.tensor([1, 5]), cond)
    assert out.shape == (2, 1, 32, 32)
    assert build_denoiser(_tiny_cfg(learned_variance=True))(torch.randn(2, 1, 32, 32), torch.tensor([1, 5]),
                                                            cond).shape == (2, 2, 32, 32)


def test_training_loss_is_finite_scalar():
    torch.manual_seed(0)
    sched = make_schedule(10, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg())
    x0 = torch.rand(2, 1, 32, 32) * 2 - 1
    loss = training_loss(net, x0, _conditions(), sched, torch.Generator().manual_seed(0), p_drop=0.5)
    assert loss.dim() == 0 and torch.isfinite(loss)
    loss.backward()


def test_training_loss_with_learned_variance():
    sched = make_schedule(10, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg(learned_variance=True))
    x0 = torch.rand(2, 1, 32, 32) * 2 - 1
    loss = training_loss(net, x0, _conditions(), sched, torch.Generator().manual_seed(0),
                         t=torch.tensor([1, 7]), learned_variance=True)
    assert torch.isfinite(loss)
    with pytest.raises(ContractError):
        training_loss(build_denoiser(_tiny_cfg()), x0, _conditions(), sched, learned_variance=True)


def test_training_loss_shape_checks():
    sched = make_schedule(10, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg())
    with pytest.raises(ContractError):
        training_loss(net, torch.zeros(2, 1, 32, 32), _conditions(n=3), sched)


class _FixedOutput(nn.Module):
    """Returns a stored tensor and records every label map it is shown"""

    def __init__(self, output=None):
        super().__init__()
        self.output = output
        self.segmaps = []

    def forward(self, x, t, segmap):
        self.segmaps.append(segmap.clone())
        return torch.zeros_like(x) if self.output is None else self.output


def test_training_loss_is_zero_for_exact_noise():
    sched = make_schedule(10, 1e-3, 0.2)
    eps = torch.randn(2, 1, 32, 32, generator=torch.Generator().manual_seed(1))
    x0 = torch.rand(2, 1, 32, 32) * 2 - 1
    loss = training_loss(_FixedOutput(eps), x0, _conditions(), sched, t=torch.tensor([3, 7]), eps=eps)
    assert float(loss) == 0.0


def test_training_loss_of_zero_prediction_is_noise_power():
    sched = make_schedule(10, 1e-3, 0.2)
    x0 = torch.zeros(8, 1, 32, 32)
    loss = training_loss(_FixedOutput(), x0, _conditions(n=8), sched, torch.Generator().manual_seed(0))
    # mean of 8192 squared standard normals, standard error ~0.016
    assert float(loss) == pytest.approx(1.0, abs=0.08)


def test_dropped_condition_never_reaches_denoiser():
    sched = make_schedule(10, 1e-3, 0.2)
    cond = _conditions(n=4)
    assert cond.abs().sum() > 0
    spy = _FixedOutput()
    for seed in range(5):
        training_loss(spy, torch.zeros(4, 1, 32, 32), cond, sched, torch.Generator().manual_seed(seed), p_drop=1.0)
    assert len(spy.segmaps) == 5
    assert all(float(seen.abs().sum()) == 0.0 for seen in spy.segmaps)


def test_sampling_is_seed_deterministic_and_mask_sensitive():
    torch.manual_seed(0)
    sched = make_schedule(10, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg())
    cond = _conditions()
    a = sample_batch(net, cond, sched, 1.5, seeds=[7, 8])
    b = sample_batch(net, cond, sched, 1.5, seeds=[7, 8])
    assert torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    # a sample depends on its own seed only
    single = sample_batch(net, cond[:1], sched, 1.5, seeds=[7])
    assert torch.allclose(single[0], a[0], atol=1e-5)
    assert not torch.allclose(sample_batch(net, cond, sched, 1.5, seeds=[9, 8])[0], a[0])
    # a different mask with the same seed changes the image
    other = _conditions(seed=5)[1:2]
    assert not torch.allclose(sample_batch(net, other, sched, 1.5, seeds=[8])[0], a[1], atol=1e-4)


def test_sample_returns_windowed_slice():
    sched = make_schedule(5, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg())
    out = sample(net, phantom_label_maps(1, size=32)[0], sched, s=1.5, seed=3)
    assert out.pixels.shape == (32, 32)
    assert 0.0 <= out.pixels.min() and out.pixels.max() <= 1.0


@pytest.mark.parametrize("height, width", [(30, 30), (29, 31)])
def test_sample_keeps_mask_shape_off_the_downsampling_grid(height, width):
    sched = make_schedule(3, 1e-3, 0.2)
    net = build_denoiser(_tiny_cfg(channel_mults=[1, 2, 4]))
    mask = phantom_label_maps(1, size=32)[0][:height, :width]
    out = sample(net, mask, sched, s=1.5, seed=0)
    assert out.pixels.shape == (height, width)
    assert np.isfinite(out.pixels).all()


def test_single_step_sampling_recovers_stored_image():
    sched = make_schedule(1, 0.3, 0.3)
    ab = sched.alpha_bar(1)
    x0 = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(4)) * 2 - 1

    class StoredImage(nn.Module):
        def forward(self, x, t, segmap):
            return (x - math.sqrt(ab) * x0.repeat(x.shape[0] // x0.shape[0], 1, 1, 1)) / math.sqrt(1 - ab)

    out = sample_batch(StoredImage(), _conditions(), sched, 1.5, seeds=[0, 1])
    assert torch.allclose(out, (x0 + 1) / 2, atol=1e-5)


def test_sampling_reports_non_finite_step():
    class Exploding(nn.Module):
        def forward(self, x, t, segmap):
            return torch.full_like(x, float("nan"))

    sched = make_schedule(5, 1e-3, 0.2)
    with pytest.raises(NumericalError) as info:
        sample_batch(Exploding(), _conditions(n=1), sched)
    assert info.value.step == 5


def test_checkpoint_roundtrip(tmp_path):
    cfg = _tiny_cfg()
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    net = build_denoiser(cfg)
    path = save_checkpoint(tmp_path / "ckpt.pt", net, cfg, sched, step=3, seed=1)
    loaded, loaded_sched, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    np.testing.assert_array_equal(loaded_sched.betas, sched.betas)
    cond = _conditions(n=1)
    assert torch.equal(sample_batch(net, cond, sched, seeds=[1]), sample_batch(loaded, cond, loaded_sched, seeds=[1]))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "none.pt")


def test_train_writes_outputs(tmp_path, toy_pairs):
    cfg = _tiny_cfg(total_steps=3)
    out = train(cfg, toy_pairs, tmp_path / "run", seed=0)
    assert out["checkpoint"].exists()
    trace = pd.read_csv(out["loss_trace"])
    assert trace["step"].tolist() == [1, 2, 3]
    assert np.isfinite(trace["loss"]).all()
    assert (tmp_path / "run" / "run_manifest_train-diffusion.json").exists()


def test_train_needs_pairs(tmp_path):
    with pytest.raises(ConfigError):
        train(_tiny_cfg(), [], tmp_path, seed=0)


def test_select_conditioning_masks():
    manifest = pd.DataFrame({"patient_id": list("aabbcc"), "has_nodule": [True, False] * 3,
                             "origin_tag": ["real"] * 6, "mask_path": [f"m{i}" for i in range(6)]})
    chosen = select_conditioning_masks(manifest, n_nodule=2, n_clean=5, seed=0)
    assert chosen["has_nodule"].sum() == 2 and (~chosen["has_nodule"]).sum() == 5
    assert chosen[chosen["has_nodule"]]["mask_path"].nunique() == 2


def test_generate_synthetic_is_deterministic(tmp_path, toy_pairs):
    write_corpus(toy_pairs, tmp_path, "train")
    cfg = _tiny_cfg()
    sched = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    torch.manual_seed(0)
    ckpt = save_checkpoint(tmp_path / "ckpt.pt", build_denoiser(cfg), cfg, sched, step=0)

    a = generate_synthetic(ckpt, tmp_path / "train", tmp_path / "s1", seed=7, n_nodule=2, n_clean=3, batch_size=2)
    b = generate_synthetic(ckpt, tmp_path / "train", tmp_path / "s2", seed=7, n_nodule=2, n_clean=3, batch_size=2)
    pd.testing.assert_frame_equal(a, b)
    assert len(a) == 5 and a["has_nodule"].sum() == 2
    assert (a["origin_tag"] == "synthetic_sdm").all()
    assert set(a["source_patient_id"]) <= {p.patient_id for p in toy_pairs}
    for rel in a["image_path"]:
        assert (tmp_path / "s1" / rel).read_bytes() == (tmp_path / "s2" / rel).read_bytes()
    assert len(read_manifest(tmp_path / "s1")) == 5


def test_generate_synthetic_refuses_real_tag(tmp_path):
    with pytest.raises(ContractError):
        generate_synthetic(tmp_path / "x.pt", tmp_path, tmp_path / "out", seed=0, origin_tag="real")


@pytest.mark.slow
def test_toy_training_reduces_loss(tmp_path, toy_pairs):
    pairs = toy_pairs + toy_pairs
    cfg = _tiny_cfg(total_steps=2000, timesteps=100, beta_start=1e-3, beta_end=0.1, base_channels=16,
                    lr=1e-3, p_drop=0.1, log_every=100)
    out = train(cfg, pairs, tmp_path, seed=0)
    losses = pd.read_csv(out["loss_trace"])["loss"].to_numpy()
    assert losses[-100:].mean() < 0.25 * losses[:100].mean()

    denoiser, sched, _ = load_checkpoint(out["checkpoint"])
    cond = torch.cat([label_map_condition(p.mask) for p in pairs[:2]])
    first = sample_batch(denoiser, cond, sched, 1.5, seeds=[1, 2])
    assert torch.equal(first, sample_batch(denoiser, cond, sched, 1.5, seeds=[1, 2]))
    swapped = sample_batch(denoiser, cond.flip(0), sched, 1.5, seeds=[1, 2])
    assert not torch.allclose(swapped[0], first[0], atol=1e-3)

    # the mask steers the image more than the seed does, averaged over 16 trials
    labels = pairs[0].mask.labels
    lungless = np.where((labels == 1) | (labels == 2), 4, labels).astype(np.uint8)
    mask_a = label_map_condition(labels).repeat(16, 1, 1, 1)
    mask_b = label_map_condition(lungless).repeat(16, 1, 1, 1)
    seeds, other_seeds = list(range(16)), list(range(100, 116))
    base = sample_batch(denoiser, mask_a, sched, 1.5, seeds=seeds)
    mask_diff = (sample_batch(denoiser, mask_b, sched, 1.5, seeds=seeds) - base).abs().mean()
    seed_diff = (sample_batch(denoiser, mask_a, sched, 1.5, seeds=other_seeds) - base).abs().mean()
    assert mask_diff > seed_diff
