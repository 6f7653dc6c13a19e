import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlab import datagen, modelzoo, victim_api
from xlab.errors import ConfigError, DataError, ParseError, ShapeError, ValidationError
from xlab.numcore import RngStream, SgdHyper


def test_family_deterministic_and_shaped():
    a = datagen.make_task_family(11, 32, 64, 1.0)
    b = datagen.make_task_family(11, 32, 64, 1.0)
    assert a.concept_means.shape == (64, 32)
    np.testing.assert_array_equal(a.concept_means, b.concept_means)
    assert not np.array_equal(a.concept_means, datagen.make_task_family(12, 32, 64).concept_means)


def test_family_means_are_read_only():
    fam = datagen.make_task_family(0, 4, 3)
    with pytest.raises(ValueError):
        fam.concept_means[0, 0] = 1.0


@pytest.mark.parametrize("scale", [0.5, 1.0, 3.0])
def test_family_pairwise_distances_concentrate(scale):
    dim = 32
    fam = datagen.make_task_family(5, dim, 96, scale)
    m = fam.concept_means
    d = np.sqrt(((m[:, None, :] - m[None, :, :]) ** 2).sum(-1))
    mean_dist = d[np.triu_indices(96, 1)].mean()
    assert abs(mean_dist - scale * np.sqrt(2 * dim)) <= 0.1 * scale * np.sqrt(2 * dim)


def test_family_needs_two_concepts():
    with pytest.raises(ConfigError):
        datagen.make_task_family(0, 4, 1)


def test_family_round_trip(tmp_path):
    fam = datagen.make_task_family(3, 8, 10, 2.0)
    datagen.save_family(fam, tmp_path / "f.xlab")
    back = datagen.load_family(tmp_path / "f.xlab")
    assert back.concept_means.tobytes() == fam.concept_means.tobytes()
    assert (back.input_dim, back.concept_scale, back.family_seed) == (8, 2.0, 3)


def test_zero_noise_samples_equal_their_means():
    fam = datagen.make_task_family(0, 5, 12)
    ds = datagen.sample_classification_task(fam, 4, 9, 0.0, 7)
    for k in range(4):
        rows = ds.features[ds.labels == k]
        np.testing.assert_array_equal(rows, np.tile(fam.concept_means[ds.class_concepts[k]], (7, 1)))


def test_task_row_count_and_balance():
    fam = datagen.make_task_family(0)
    ds = datagen.sample_classification_task(fam, 10, 1, 0.35, 50)
    assert len(ds) == 500
    np.testing.assert_array_equal(np.bincount(ds.labels), [50] * 10)
    assert len(set(ds.class_concepts)) == 10


def test_task_too_many_classes():
    fam = datagen.make_task_family(0, 4, 5)
    with pytest.raises(ConfigError):
        datagen.sample_classification_task(fam, 6, 0, 0.1, 3)


def test_nearest_centroid_oracle_at_low_noise():
    fam = datagen.make_task_family(21, 32, 96, 1.0)
    ds = datagen.sample_classification_task(fam, 10, 4, 0.1 * fam.concept_scale, 100, sample_seed=999)
    centroids = fam.concept_means[list(ds.class_concepts)]
    d = ((ds.features[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(axis=1) == ds.labels) > 0.99


def test_train_and_test_draws_share_concepts_not_samples():
    fam = datagen.make_task_family(0)
    tr = datagen.sample_classification_task(fam, 5, 8, 0.3, 10, sample_seed=1)
    te = datagen.sample_classification_task(fam, 5, 8, 0.3, 10, sample_seed=2)
    assert tr.class_concepts == te.class_concepts
    assert not np.array_equal(tr.features, te.features)


def _pool(overlap, size=2000, seed=3):
    fam = datagen.make_task_family(1)
    task = datagen.sample_classification_task(fam, 10, 2, 0.35, 5)
    return fam, task, datagen.sample_proxy_pool(fam, size, overlap, seed, task_concepts=task.class_concepts)


def test_pool_is_unlabeled_and_sized():
    _, _, pool = _pool(0.5)
    assert len(pool) == 2000 and pool.labels is None and pool.split_tag == "pool"


def test_pool_zero_overlap_never_uses_task_concepts():
    _, task, pool = _pool(0.0)
    assert not np.isin(pool.origins, task.class_concepts).any()


def test_pool_full_overlap_only_task_concepts():
    _, task, pool = _pool(1.0)
    assert np.isin(pool.origins, task.class_concepts).all()


def test_pool_overlap_fraction():
    _, task, pool = _pool(0.5, size=10_000, seed=17)
    frac = np.isin(pool.origins, task.class_concepts).mean()
    assert abs(frac - 0.5) <= 0.02


def test_pool_overlap_range():
    fam = datagen.make_task_family(1)
    with pytest.raises(ConfigError):
        datagen.sample_proxy_pool(fam, 10, 1.5, 0, task_concepts=(0, 1))


def test_pool_size_does_not_change_task_draws():
    fam = datagen.make_task_family(1)
    t1 = datagen.sample_classification_task(fam, 4, 2, 0.3, 5)
    datagen.sample_proxy_pool(fam, 50, 0.5, 0, task_concepts=t1.class_concepts)
    t2 = datagen.sample_classification_task(fam, 4, 2, 0.3, 5)
    np.testing.assert_array_equal(t1.features, t2.features)


def test_split_sizes_follow_floor_allocation():
    ds = datagen.Dataset(np.zeros((5000, 2)), np.zeros(5000, dtype=int), 1)
    a, b = datagen.split(ds, datagen.SplitSpec((0.9, 0.1), 4))
    assert (len(a), len(b)) == (4500, 500)
    sizes = [len(s) for s in datagen.split(datagen.Dataset(np.zeros((10, 1)), None, 0), datagen.SplitSpec((0.33, 0.33, 0.34)))]
    assert sizes == [4, 3, 3]


def test_split_identity():
    ds = datagen.Dataset(np.arange(12.0).reshape(6, 2), np.arange(6) % 2, 2)
    (only,) = datagen.split(ds, datagen.SplitSpec((1.0,), 0))
    assert sorted(map(tuple, only.features)) == sorted(map(tuple, ds.features))


@settings(max_examples=40)
@given(st.integers(1, 200), st.lists(st.integers(0, 10), min_size=1, max_size=5).filter(lambda w: sum(w) > 0),
       st.integers(0, 2**32))
def test_split_is_a_partition(n, weights, seed):
    total = sum(weights)
    fractions = [w / total for w in weights]
    fractions[-1] = 1.0 - sum(fractions[:-1])
    ds = datagen.Dataset(np.arange(n, dtype=float).reshape(n, 1), None, 0)
    parts = datagen.split(ds, datagen.SplitSpec(tuple(fractions), seed))
    values = np.sort(np.concatenate([p.features[:, 0] for p in parts]))
    np.testing.assert_array_equal(values, np.arange(n, dtype=float))


def test_split_errors():
    with pytest.raises(DataError):
        datagen.split(datagen.Dataset(np.zeros((0, 2)), None, 0), datagen.SplitSpec((1.0,)))
    with pytest.raises(ConfigError):
        datagen.SplitSpec((0.5, 0.4))


def test_dataset_label_validation():
    with pytest.raises(ValidationError):
        datagen.Dataset(np.zeros((2, 2)), [0, 3], 3)
    with pytest.raises(ShapeError):
        datagen.Dataset(np.zeros((2, 2)), [0], 3)


def test_csv_round_trip_bit_identical(tmp_path, rng):
    ds = datagen.Dataset(rng.normal(size=(10, 4)) * 10.0 ** rng.integers(-8, 8, (10, 4)), rng.integers(0, 3, 10), 3)
    datagen.save_dataset(ds, tmp_path / "d.csv")
    back = datagen.load_dataset(tmp_path / "d.csv")
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.class_count == 3


def test_csv_unlabeled_round_trip(tmp_path, rng):
    ds = datagen.Dataset(rng.normal(size=(5, 3)), None, 0, "pool")
    datagen.save_dataset(ds, tmp_path / "p.csv")
    back = datagen.load_dataset(tmp_path / "p.csv")
    assert back.labels is None and back.split_tag == "pool"
    assert back.features.tobytes() == ds.features.tobytes()


def test_csv_wrong_column_count_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("#xlab-dataset v1, dim=3, classes=2\n0.1,0.2,0.3,1\n0.1,0.2,0.3,0.4,1\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        datagen.load_dataset(path)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_csv_header_and_label_errors(tmp_path):
    bad = tmp_path / "h.csv"
    bad.write_text("dim=3\n1,2,3\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        datagen.load_dataset(bad)
    assert exc.value.line == 1
    out_of_range = tmp_path / "l.csv"
    out_of_range.write_text("#xlab-dataset v1, dim=1, classes=2\n0.5,2\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        datagen.load_dataset(out_of_range)


def test_external_embedding_file_trains_and_serves_a_victim(tmp_path):
    gen = np.random.default_rng(8)
    centers = gen.normal(scale=3.0, size=(4, 8))
    labels = np.repeat(np.arange(4), 25)
    feats = centers[labels] + gen.normal(scale=0.5, size=(100, 8))
    lines = ["#xlab-dataset v1, dim=8, classes=4"]
    lines += [",".join(f"{v:.6e}" for v in row) + f",{y}" for row, y in zip(feats, labels)]
    (tmp_path / "emb.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    ds = datagen.load_dataset(tmp_path / "emb.csv")
    assert (len(ds), ds.dim, ds.class_count) == (100, 8, 4)
    spec = modelzoo.BackboneSpec(8, (16, 16), 4, 10, "tanh", "shallow")
    bb = modelzoo.init_backbone(spec, RngStream(0))
    bb.freeze()
    model, report = modelzoo.train_linear_probe(bb, ds, SgdHyper(0.05), 60, RngStream(1))
    assert report.best_validation_accuracy >= 0.9
    endpoint = victim_api.deploy(model, "hard", 100)
    labels_back = endpoint.query(ds.features)
    assert endpoint.remaining() == 0
    assert np.mean(labels_back == ds.labels) >= 0.9
