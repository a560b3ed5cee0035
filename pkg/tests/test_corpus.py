import numpy as np
import pandas as pd
import pytest

from corpus import (CorpusSplit, SlicePair, build_corpus, load_slice_pairs, mix_synthetic,
                    mix_synthetic_manifest, read_manifest, split_by_patient, subsample_negatives,
                    write_corpus, write_slice_catalog)
from errors import ConfigError, ContractError, DataIntegrityError, FormatError
from semantic_masks import SemanticLabelMap


def _pair(patient, z, nodule=False, origin_tag="real", source=None):
    labels = np.full((8, 8), 4, dtype=np.uint8)
    labels[2:6, 2:6] = 1
    if nodule:
        labels[3, 3] = 5
    return SlicePair(image=np.full((8, 8), 0.5, dtype=np.float32), mask=SemanticLabelMap(labels),
                     patient_id=patient, slice_index=z, origin_tag=origin_tag, source_patient_id=source)


def test_split_by_patient_is_disjoint_and_seeded():
    patients = [f"p{i:03d}" for i in range(20)]
    a = split_by_patient(patients, 12, 5, seed=1)
    b = split_by_patient(reversed(patients), 12, 5, seed=1)
    assert a == b
    assert len(a.train_patients) == 12 and len(a.test_patients) == 5
    assert not a.train_patients & a.test_patients
    assert split_by_patient(patients, 12, 5, seed=2) != a


def test_split_needs_enough_patients():
    with pytest.raises(ConfigError):
        split_by_patient(["a", "b"], 2, 1, seed=0)


def test_corpus_split_rejects_overlap():
    with pytest.raises(DataIntegrityError):
        CorpusSplit(frozenset({"a", "b"}), frozenset({"b"}), seed=0)


@pytest.mark.parametrize("n, ratio, expected", [(4, 0.25, 1), (7, 0.25, 1), (8, 0.25, 2), (3, 0.25, 0),
                                                (10, 1.0, 10)])
def test_subsample_counts(n, ratio, expected):
    assert len(subsample_negatives(list(range(n)), ratio, seed=0)) == expected


def test_subsample_keeps_input_order_and_is_seeded():
    items = list(range(100))
    kept = subsample_negatives(items, 0.25, seed=5)
    assert kept == sorted(kept)
    assert kept == subsample_negatives(items, 0.25, seed=5)
    assert set(kept) <= set(items)


def test_strided_subsample():
    assert subsample_negatives(list(range(8)), 0.25, strategy="strided") == [0, 4]


def test_subsample_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        subsample_negatives([1, 2], 0.0)


def test_mix_synthetic_only_into_train():
    train = [_pair("a", 0)]
    synth = [_pair("syn-00000", 0, origin_tag="synthetic_sdm", source="a")]
    assert len(mix_synthetic(train, synth)) == 2
    with pytest.raises(ContractError):
        mix_synthetic(train, synth, target="test")
    with pytest.raises(ContractError):
        mix_synthetic(train, [_pair("b", 0)])


def test_mix_synthetic_manifest_rejects_real_rows():
    df = pd.DataFrame({"origin_tag": ["real"]})
    with pytest.raises(ContractError):
        mix_synthetic_manifest(df, df)


def test_slice_pair_shape_mismatch():
    with pytest.raises(ContractError):
        SlicePair(image=np.zeros((4, 4)), mask=SemanticLabelMap(np.zeros((8, 8), dtype=np.uint8)),
                  patient_id="a", slice_index=0)


def test_write_corpus_roundtrip(tmp_path):
    pairs = [_pair("b", 3), _pair("a", 7, nodule=True), _pair("a", 2)]
    df = write_corpus(pairs, tmp_path, "train")
    assert list(zip(df["patient_id"], df["slice_index"])) == [("a", 2), ("a", 7), ("b", 3)]
    manifest = read_manifest(tmp_path / "train")
    assert manifest["has_nodule"].tolist() == [False, True, False]
    assert (manifest["source_patient_id"] == manifest["patient_id"]).all()
    loaded = load_slice_pairs(manifest, tmp_path / "train")
    assert loaded[1].has_nodule
    np.testing.assert_allclose(loaded[0].image, 128 / 255, atol=1e-6)


def test_read_manifest_missing_column(tmp_path):
    (tmp_path / "manifest.csv").write_text("patient_id,slice_index\na,0\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_manifest_mask_disagreement(tmp_path):
    write_corpus([_pair("a", 0, nodule=True)], tmp_path, "train")
    manifest = read_manifest(tmp_path / "train")
    manifest["has_nodule"] = False
    with pytest.raises(DataIntegrityError):
        load_slice_pairs(manifest, tmp_path / "train")


def test_catalog_of_phantom_cohort(toy_config, tmp_path):
    catalog, run = write_slice_catalog(toy_config, tmp_path / "a")
    # every phantom has lungs on slices 1..D-2 and at least one nodule
    assert run.counts["series"] == 3
    assert set(catalog["patient_id"]) == {f"phantom.0.{i:03d}" for i in range(3)}
    assert catalog["has_nodule"].any() and (~catalog["has_nodule"]).any()
    assert catalog["slice_index"].between(1, 10).all()
    for patient, rows in catalog.groupby("patient_id"):
        assert rows["has_nodule"].any(), patient
    assert (tmp_path / "a" / "catalog" / "run_manifest_build-masks.json").exists()


def test_corpus_is_deterministic_and_patient_disjoint(toy_config, tmp_path):
    write_slice_catalog(toy_config, tmp_path / "cat")
    a, _ = build_corpus(toy_config, tmp_path / "cat" / "catalog", tmp_path / "c1", seed=11)
    b, _ = build_corpus(toy_config, tmp_path / "cat" / "catalog", tmp_path / "c2", seed=11)
    for split in ("train", "test"):
        assert (tmp_path / "c1" / split / "manifest.csv").read_bytes() == \
               (tmp_path / "c2" / split / "manifest.csv").read_bytes()
        pd.testing.assert_frame_equal(a[split], b[split])
    assert not set(a["train"]["patient_id"]) & set(a["test"]["patient_id"])
    assert a["train"]["patient_id"].nunique() == 2 and a["test"]["patient_id"].nunique() == 1
    loaded = load_slice_pairs(read_manifest(tmp_path / "c1" / "train"), tmp_path / "c1" / "train")
    assert len(loaded) == len(a["train"])


def test_corpus_subsamples_only_negatives(toy_config, tmp_path):
    write_slice_catalog(toy_config, tmp_path / "cat")
    catalog = read_manifest(tmp_path / "cat" / "catalog")
    cfg = toy_config.model_copy(update={"corpus": toy_config.corpus.model_copy(update={"keep_ratio": 0.25})})
    manifests, run = build_corpus(cfg, tmp_path / "cat" / "catalog", tmp_path / "c", seed=3)
    kept = pd.concat(manifests.values())
    assert kept["has_nodule"].sum() == catalog["has_nodule"].sum()
    n_neg = int((~catalog["has_nodule"]).sum())
    assert (~kept["has_nodule"]).sum() == n_neg // 4
    assert run.counts["non_nodule_kept"] == n_neg // 4
