import json

import numpy as np
import pytest

from corpus import write_corpus
from errors import ConfigError, ContractError, NumericalError
from fid_eval import (FeatureStats, IdentityEmbedder, extract_features, fid, fid_report, gaussian_stats,
                      make_embedder)


def _stats(mu, sigma, n=100) -> FeatureStats:
    return FeatureStats(mu=np.atleast_1d(np.asarray(mu, dtype=np.float64)),
                        sigma=np.atleast_2d(np.asarray(sigma, dtype=np.float64)), n=n)


def test_fid_of_a_set_with_itself_is_zero():
    features = np.random.default_rng(0).normal(size=(50, 8))
    stats = gaussian_stats(features)
    assert fid(stats, stats) <= 1e-6


def test_one_dimensional_closed_form():
    assert fid(_stats(0.0, 1.0), _stats(1.0, 4.0)) == pytest.approx(2.0, abs=1e-9)


def test_diagonal_closed_form():
    rng = np.random.default_rng(1)
    mu_a, mu_b = rng.normal(size=8), rng.normal(size=8)
    var_a, var_b = rng.uniform(0.1, 3.0, 8), rng.uniform(0.1, 3.0, 8)
    expected = np.sum((mu_a - mu_b) ** 2) + np.sum(var_a + var_b - 2 * np.sqrt(var_a * var_b))
    assert fid(_stats(mu_a, np.diag(var_a)), _stats(mu_b, np.diag(var_b))) == pytest.approx(expected, rel=1e-9)


def test_fid_is_symmetric():
    rng = np.random.default_rng(2)
    a = gaussian_stats(rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5)))
    b = gaussian_stats(rng.normal(loc=0.5, size=(60, 5)))
    assert fid(a, b) == pytest.approx(fid(b, a), rel=1e-8)
    assert fid(a, b) > 0


def test_gaussian_stats_needs_two_rows():
    with pytest.raises(ContractError):
        gaussian_stats(np.ones((1, 4)))


def test_gaussian_stats_uses_unbiased_covariance():
    stats = gaussian_stats(np.array([[0.0], [2.0]]))
    assert stats.mu[0] == 1.0 and stats.sigma[0, 0] == 2.0 and stats.n == 2


def test_dimension_mismatch():
    with pytest.raises(ContractError):
        fid(_stats(np.zeros(2), np.eye(2)), _stats(np.zeros(3), np.eye(3)))


def test_non_finite_statistics():
    with pytest.raises(NumericalError):
        fid(_stats([np.nan], 1.0), _stats(0.0, 1.0))


def test_identity_embedder_resizes():
    features = IdentityEmbedder(size=8)(np.ones((3, 32, 32)))
    assert features.shape == (3, 64)
    np.testing.assert_allclose(features, 1.0)


def test_extract_features_rejects_empty_set():
    with pytest.raises(ContractError):
        extract_features([], IdentityEmbedder())


def test_unknown_embedder():
    with pytest.raises(ConfigError):
        make_embedder("vgg")


def test_report_on_identical_sets(tmp_path, toy_pairs):
    write_corpus(toy_pairs, tmp_path, "train")
    out = tmp_path / "fid.json"
    report = fid_report(tmp_path / "train", tmp_path / "train", IdentityEmbedder(size=8), out)
    by_subset = {r["subset"]: r for r in report["results"]}
    assert set(by_subset) == {"nodule", "non_nodule", "all"}
    for entry in by_subset.values():
        assert entry["fid"] <= 1e-6
    assert by_subset["all"]["n_real"] == len(toy_pairs)
    assert json.loads(out.read_text())["results"] == report["results"]


def test_report_skips_small_subsets(tmp_path, toy_pairs):
    nodules = [p for p in toy_pairs if p.has_nodule]
    write_corpus(toy_pairs, tmp_path, "real")
    write_corpus(nodules[:1] + [p for p in toy_pairs if not p.has_nodule], tmp_path, "synth")
    report = fid_report(tmp_path / "real", tmp_path / "synth", IdentityEmbedder(size=4))
    by_subset = {r["subset"]: r for r in report["results"]}
    assert by_subset["nodule"]["fid"] is None and "reason" in by_subset["nodule"]
    assert by_subset["non_nodule"]["fid"] <= 1e-6
    assert by_subset["all"]["fid"] > 0
