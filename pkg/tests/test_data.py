import numpy as np
import pytest

from gmmda.data import (MultiLabelDataset, ShiftSpec, batches, calibrated_inclusion, generate_pair,
                        load_csv, paired_batches, save_csv)


def test_same_seed_bit_identical():
    a = generate_pair(5, 100)
    b = generate_pair(5, 100)
    assert a[0] == b[0] and a[1] == b[1]
    assert not np.array_equal(generate_pair(6, 100)[0].features, a[0].features)


def test_shapes_and_tags():
    src, tgt = generate_pair(0, 50, d=6, C=4)
    assert (src.n, src.d, src.num_classes) == (50, 6, 4)
    assert src.domain_tag == "source" and tgt.domain_tag == "target"
    assert np.all(src.labels.sum(axis=1) >= 1)


@pytest.mark.parametrize("kw", [dict(n_per_domain=0), dict(d=1), dict(C=1)])
def test_invalid_dims(kw):
    with pytest.raises(ValueError):
        generate_pair(0, **{"n_per_domain": 10, **kw})


def test_label_marginals():
    src, tgt = generate_pair(1, 10000)
    for ds in (src, tgt):
        assert np.abs(ds.labels.mean(axis=0) - 0.25).max() <= 0.02


def test_calibrated_inclusion_solves_marginal():
    q = calibrated_inclusion(0.25, 8)
    assert q / (1 - (1 - q) ** 8) == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(ValueError):
        calibrated_inclusion(0.1, 8)


def test_shift_invertible():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 5))
    s = ShiftSpec(rotation_angle=1.1, translation=list(rng.normal(size=5)), scale=0.7)
    assert np.allclose(s.invert(s.apply(x)), x, atol=1e-12)


def test_shift_validation():
    with pytest.raises(ValueError):
        ShiftSpec(scale=0)
    with pytest.raises(ValueError):
        ShiftSpec(translation=[1.0, 2.0]).translation_vector(3)


def test_dataset_validation():
    with pytest.raises(ValueError):
        MultiLabelDataset(np.ones((2, 3)), np.array([[1.0, 0.0], [2.0, 0.0]]), "source")
    with pytest.raises(ValueError):
        MultiLabelDataset(np.ones((2, 3)), np.array([[1.0, 0.0], [0.0, 0.0]]), "source")
    with pytest.raises(ValueError):
        MultiLabelDataset(np.ones((2, 3)), np.ones((2, 1)), "source")
    MultiLabelDataset(np.ones((2, 3)), np.array([[1.0, 0.0], [0.0, 0.0]]), "source",
                      allow_empty_rows=True)


def _linear_probe_accuracy(src, tgt, seed):
    x = np.vstack([src.features, tgt.features])
    y = np.r_[np.zeros(src.n), np.ones(tgt.n)]
    perm = np.random.default_rng(seed).permutation(y.size)
    x, y = x[perm], y[perm]
    half = y.size // 2
    design = np.c_[x, np.ones(y.size)]
    w, *_ = np.linalg.lstsq(design[:half], 2 * y[:half] - 1, rcond=None)
    return np.mean((design[half:] @ w > 0) == (y[half:] == 1))


def test_identity_shift_indistinguishable(identity_shift):
    accs = [_linear_probe_accuracy(*generate_pair(s, 1000, shift=identity_shift), s) for s in range(5)]
    assert max(accs) <= 0.55, accs


def test_default_shift_is_detectable():
    assert _linear_probe_accuracy(*generate_pair(0, 1000), 0) > 0.9


def test_csv_roundtrip(tmp_path):
    src, _ = generate_pair(2, 20, d=4, C=3)
    save_csv(src, tmp_path / "s.csv")
    back = load_csv(tmp_path / "s.csv")
    assert back == src


def test_csv_header_mismatch(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("feature_0,feat_1,label_0\n0.1,0.2,1\n")
    with pytest.raises(ValueError, match="feat_1"):
        load_csv(p)


def test_csv_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="no rows"):
        load_csv(p)


def test_csv_malformed_row_line_number(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("feature_0,label_0\n0.1,1\n0.2\n")
    with pytest.raises(ValueError, match=":3:"):
        load_csv(p)


def test_csv_bad_label(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("feature_0,label_0\n0.1,2\n")
    with pytest.raises(ValueError, match="label"):
        load_csv(p)


def _ds(n):
    return MultiLabelDataset(np.arange(n, dtype=float)[:, None], np.ones((n, 2)), "source")


def test_batch_sizes():
    assert [b.size for b in batches(_ds(10), 4, 0, 0)] == [4, 4, 2]
    assert [b.size for b in batches(_ds(10), 11, 0, 0)] == [10]
    with pytest.raises(ValueError):
        batches(_ds(10), 1, 0, 0)


def test_batch_order_determinism():
    a = [b.indices for b in batches(_ds(30), 4, 3, 1)]
    b = [b.indices for b in batches(_ds(30), 4, 3, 1)]
    c = [b.indices for b in batches(_ds(30), 4, 3, 2)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))
    assert sorted(np.concatenate(a).tolist()) == list(range(30))


def test_paired_batches_recycle_shorter_side():
    pairs = list(paired_batches(_ds(20), _ds(6), 4, 0, 0))
    assert len(pairs) == 5
    assert all(t.labels is None for _, t in pairs)
    assert all(s.labels is not None for s, _ in pairs)


def test_default_shift_gap():
    from gmmda.trainer import ExperimentConfig, evaluate_model, train
    cfg = ExperimentConfig(seed=0, critic="none")
    src, tgt = generate_pair(0)
    model, _ = train(cfg, src, tgt)
    gap = evaluate_model(model, src).map - evaluate_model(model, tgt).map
    assert gap >= 0.05
