import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_backbone, small_task, trained_model
from xlab import datagen, modelzoo, thief, victim_api
from xlab.errors import ConfigError, StateError
from xlab.numcore import RngStream, SgdHyper


def pool_of(x):
    return datagen.Dataset(np.asarray(x, dtype=float), None, 0, "pool")


@pytest.fixture(scope="module")
def substitute():
    return trained_model(seed=1, classes=4, epochs=10)[0]


@pytest.fixture(scope="module")
def victim():
    return trained_model(seed=2, classes=3, epochs=10)[0]


@pytest.fixture(scope="module")
def pool():
    fam, task = small_task(seed=2, classes=3)
    return datagen.sample_proxy_pool(fam, 300, 0.5, 5, task_concepts=task.class_concepts, noise_sigma=0.5)


def attack_config(budget=60, kind="random", rounds=1, seed=0, mode="linear_probe", epochs=5, space="probs"):
    return thief.AttackConfig(budget, thief.SelectionStrategy(kind, rounds), small_backbone(7), mode,
                              SgdHyper(0.05), seed, epochs=epochs, kcenter_space=space)


# -- strategy / config validation --------------------------------------------------


def test_round_sizes():
    assert thief.SelectionStrategy("entropy", 5).round_sizes(500) == [100] * 5
    assert thief.SelectionStrategy("kcenter", 3).round_sizes(10) == [3, 3, 4]
    assert thief.SelectionStrategy("kcenter", 2, per_round=4).round_sizes(10) == [4, 4]
    with pytest.raises(ConfigError):
        thief.SelectionStrategy("kcenter", 3, per_round=5).round_sizes(10)
    with pytest.raises(ConfigError):
        thief.SelectionStrategy("random", 2)
    with pytest.raises(ConfigError):
        thief.SelectionStrategy("margin")


def test_attack_config_needs_validation_slice():
    with pytest.raises(ConfigError):
        attack_config(budget=9)


# -- random ------------------------------------------------------------------------


def test_random_full_pool_returns_everything():
    picks = thief.select_random(pool_of(np.zeros((12, 2))), 12, RngStream(0))
    assert sorted(picks.tolist()) == list(range(12))


def test_random_is_seeded():
    p = pool_of(np.zeros((100, 2)))
    a = thief.select_random(p, 10, RngStream(4))
    np.testing.assert_array_equal(a, thief.select_random(p, 10, RngStream(4)))
    assert len(set(a.tolist())) == 10


def test_random_respects_exclusions_and_size():
    p = pool_of(np.zeros((10, 2)))
    picks = thief.select_random(p, 7, RngStream(1), exclude=[0, 1, 2])
    assert set(picks.tolist()) == set(range(3, 10))
    with pytest.raises(ConfigError):
        thief.select_random(p, 11, RngStream(1))


def test_random_single_draw_frequencies():
    p = pool_of(np.zeros((4, 1)))
    rng = RngStream(2024)
    counts = np.zeros(4)
    for _ in range(100_000):
        counts[thief.select_random(p, 1, rng)[0]] += 1
    np.testing.assert_allclose(counts / 100_000, 0.25, atol=0.01)


# -- entropy ------------------------------------------------------------------------


def _probe_model(head_weight, dim):
    """Fixed model: identity-like backbone with a chosen head, for controlled soft outputs."""
    spec = modelzoo.BackboneSpec(dim, (dim,), 2)
    bb = modelzoo.Backbone(spec, [np.eye(dim)], [np.zeros(dim)])
    w = np.asarray(head_weight, dtype=float)
    return modelzoo.ComposedModel(bb, modelzoo.Head(w, np.zeros(w.shape[0])), trained=True)


def test_entropy_prefers_uniform_prediction():
    model = _probe_model(np.array([[40.0, 0.0], [0.0, 40.0], [0.0, 0.0]]), 2)
    x = np.array([[0.9, 0.0], [0.0, 0.0], [0.0, 0.9], [0.8, 0.1]])
    picks = thief.select_entropy(pool_of(x), model, 4)
    assert picks[0] == 1
    h = thief.prediction_entropy(modelzoo.predict(model, x[[1]], "soft"))
    assert h[0] == pytest.approx(math.log(3), abs=1e-12)


def test_entropy_one_hot_chosen_last():
    probs = np.array([[1.0, 0.0, 0.0], [0.4, 0.3, 0.3]])
    np.testing.assert_allclose(thief.prediction_entropy(probs), [0.0, -(0.4 * math.log(0.4) + 0.6 * math.log(0.3))])
    model = _probe_model(np.array([[200.0, 0.0], [0.0, 0.0]]), 2)
    x = np.array([[0.99, 0.0], [0.1, 0.0], [0.3, 0.0]])
    assert thief.select_entropy(pool_of(x), model, 3).tolist()[-1] == 0


def _entropy_oracle(model, x, n, already=()):
    probs = modelzoo.predict(model, x, "soft")
    scored = []
    for i, row in enumerate(probs):
        if i in already:
            continue
        h = -math.fsum(p * math.log(p) for p in row if p > 0)
        scored.append((-h, i))
    return [i for _, i in sorted(scored)[:n]]


def test_entropy_matches_full_sort_oracle(substitute):
    gen = np.random.default_rng(0)
    for trial in range(30):
        x = gen.normal(scale=2.0, size=(50, 6))
        # duplicated rows create exact entropy ties
        x[gen.integers(0, 50, 10)] = x[gen.integers(0, 50, 10)]
        already = set(gen.choice(50, 5, replace=False).tolist()) if trial % 2 else set()
        n = int(gen.integers(1, 45))
        picks = thief.select_entropy(pool_of(x), substitute, n, sorted(already))
        assert picks.tolist() == _entropy_oracle(substitute, x, n, already)


def test_entropy_needs_trained_substitute():
    untrained = modelzoo.compose(small_backbone(), 3, RngStream(0))
    with pytest.raises(StateError):
        thief.select_entropy(pool_of(np.zeros((3, 6))), untrained, 1)


# -- k-center -----------------------------------------------------------------------


def covering_radius(points, centers):
    return max(min(np.linalg.norm(p - points[c]) for c in centers) for p in points)


def test_kcenter_hand_traces():
    assert thief.select_kcenter([[0.0], [10.0]], [[0.0]], 1).tolist() == [1]
    assert thief.select_kcenter([[0.0], [4.0], [10.0]], [[0.0]], 2).tolist() == [2, 1]


def test_kcenter_tie_goes_to_lower_index():
    assert thief.select_kcenter([[-1.0], [1.0], [0.0]], [[0.0]], 1).tolist() == [0]


def test_kcenter_needs_seed_set():
    with pytest.raises(StateError):
        thief.select_kcenter(np.zeros((3, 2)), np.zeros((0, 2)), 1)


def test_kcenter_two_approximation_exhaustive():
    gen = np.random.default_rng(123)
    checked = 0
    for n in range(2, 13):
        for k in range(1, 4):
            if k > n:
                continue
            for _ in range(15):
                pts = gen.normal(size=(n, 2)) * gen.uniform(0.1, 10)
                first = int(gen.integers(n))
                picks = thief.select_kcenter(pts, pts[[first]], k - 1).tolist()
                greedy = covering_radius(pts, [first] + picks)
                optimum = min(covering_radius(pts, c) for c in itertools.combinations(range(n), k))
                assert greedy <= 2 * optimum + 1e-12
                checked += 1
    assert checked > 400


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_kcenter_two_approximation_property(n, k, seed):
    k = min(k, n)
    pts = np.random.default_rng(seed).normal(size=(n, 3))
    picks = thief.select_kcenter(pts, pts[[0]], k - 1).tolist()
    optimum = min(covering_radius(pts, c) for c in itertools.combinations(range(n), k))
    assert covering_radius(pts, [0] + picks) <= 2 * optimum + 1e-12


def test_selection_is_permutation_equivariant(substitute):
    gen = np.random.default_rng(9)
    x = gen.normal(size=(80, 6))
    perm = gen.permutation(80)
    # row j of the permuted pool is row perm[j] of the original; continuous data has no ties
    picks = thief.select_entropy(pool_of(x), substitute, 15)
    picks_perm = thief.select_entropy(pool_of(x[perm]), substitute, 15)
    assert perm[picks_perm].tolist() == picks.tolist()

    seed_rows = x[:3]
    k = thief.select_kcenter(x, seed_rows, 10)
    k_perm = thief.select_kcenter(x[perm], seed_rows, 10)
    assert perm[k_perm].tolist() == k.tolist()


# -- attack loop ---------------------------------------------------------------------


def test_random_attack_spends_exact_budget(victim, pool):
    ep = victim_api.deploy(victim, "hard", 500)
    big_pool = datagen.Dataset(np.vstack([pool.features] * 2), None, 0, "pool")
    cfg = thief.AttackConfig(500, thief.default_strategy("random"), small_backbone(7), "linear_probe",
                             SgdHyper(0.05), 1, epochs=3)
    model, tr = thief.run_attack(cfg, ep, big_pool)
    assert tr.total_spent == 500 == ep.ledger.spent == len(set(tr.queried_indices))
    assert not tr.truncated and tr.query_rounds == [0] * 500
    # validation slice is 50 of the 500 labels
    assert all(abs(v * 50 - round(v * 50)) < 1e-9 for v in tr.per_round_validation_accuracy)
    np.testing.assert_array_equal(tr.returned_labels, modelzoo.predict(victim, big_pool.features[tr.queried_indices]))
    assert model.trained


@pytest.mark.parametrize("kind,space", [("entropy", "probs"), ("kcenter", "probs"), ("kcenter", "features")])
def test_active_attack_rounds(victim, pool, kind, space):
    ep = victim_api.deploy(victim, "hard", 60)
    _, tr = thief.run_attack(attack_config(60, kind, 3, space=space), ep, pool)
    assert tr.total_spent == 60 == ep.ledger.spent
    assert len(set(tr.queried_indices)) == 60
    assert [tr.query_rounds.count(r) for r in range(3)] == [20, 20, 20]
    assert len(tr.per_round_validation_accuracy) == 3


def test_single_round_active_attack_equals_random(victim, pool):
    runs = []
    for kind in ("random", "entropy", "kcenter"):
        ep = victim_api.deploy(victim)
        model, tr = thief.run_attack(attack_config(40, kind, 1, seed=3), ep, pool)
        runs.append((tr.queried_indices, model.head.weight.tobytes()))
    assert runs[0] == runs[1] == runs[2]


def test_attack_is_deterministic(victim, pool):
    out = []
    for _ in range(2):
        model, tr = thief.run_attack(attack_config(40, "entropy", 2, seed=5, mode="full_finetune"),
                                     victim_api.deploy(victim), pool)
        out.append((tr.queried_indices, tr.returned_labels, model.backbone.param_bytes()))
    assert out[0] == out[1]


def test_attack_truncates_when_victim_budget_runs_out(victim, pool):
    ep = victim_api.deploy(victim, "hard", 45)
    model, tr = thief.run_attack(attack_config(60, "entropy", 3), ep, pool)
    assert tr.truncated and tr.total_spent == 45 == ep.ledger.spent
    assert [tr.query_rounds.count(r) for r in range(3)] == [20, 20, 5]
    assert model.trained


def test_attack_with_nothing_left_is_a_state_error(victim, pool):
    ep = victim_api.deploy(victim, "hard", 5)
    ep.query(pool.features[:5])
    with pytest.raises(StateError):
        thief.run_attack(attack_config(20), ep, pool)


def test_attack_over_http_matches_in_process(victim, pool):
    model_a, tr_a = thief.run_attack(attack_config(40, "kcenter", 2, seed=8), victim_api.deploy(victim, budget=40), pool)
    with victim_api.serve(victim_api.deploy(victim, budget=40)) as server:
        model_b, tr_b = thief.run_attack(attack_config(40, "kcenter", 2, seed=8), victim_api.RemoteClient(server.url), pool)
        assert server.endpoint.ledger.spent == 40
    assert tr_a.queried_indices == tr_b.queried_indices
    assert model_a.head.weight.tobytes() == model_b.head.weight.tobytes()


def test_soft_victim_labels_are_argmaxed(victim, pool):
    _, tr = thief.run_attack(attack_config(30), victim_api.deploy(victim, "soft"), pool)
    np.testing.assert_array_equal(tr.returned_labels, modelzoo.predict(victim, pool.features[tr.queried_indices]))


def test_pool_smaller_than_budget(victim):
    with pytest.raises(ConfigError):
        thief.run_attack(attack_config(20), victim_api.deploy(victim), pool_of(np.zeros((10, 6))))


def test_transcript_csv_round_trip(victim, pool, tmp_path):
    _, tr = thief.run_attack(attack_config(30, "entropy", 3), victim_api.deploy(victim), pool)
    tr.save_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "round,index,label,spent" and lines[-1].endswith(",30")
    back = thief.load_transcript(tmp_path / "t.csv")
    assert (back.queried_indices, back.returned_labels, back.query_rounds) == (
        tr.queried_indices, tr.returned_labels, tr.query_rounds)
