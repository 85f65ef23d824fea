import filecmp
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailsearch.graph import load_dataset
from tailsearch.synthgen import Scenario, ScenarioConfig, ScenarioError, generate

SMALL = dict(n_queries=120, n_services=30, sessions=1500, n_trees=3)


def test_same_seed_same_files(tmp_path):
    generate(ScenarioConfig(seed=3, **SMALL), tmp_path / "a")
    generate(ScenarioConfig(seed=3, **SMALL), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_different_seed_differs():
    a = Scenario(ScenarioConfig(seed=1, **SMALL))
    b = Scenario(ScenarioConfig(seed=2, **SMALL))
    assert not np.array_equal(a.labels, b.labels)


def test_zero_noise_labels_are_the_oracle_draws():
    sc = Scenario(ScenarioConfig(seed=5, label_noise=0.0, **SMALL))
    assert np.array_equal(sc.labels, sc.clean_clicks)
    noisy = Scenario(ScenarioConfig(seed=5, label_noise=0.2, **SMALL))
    assert np.array_equal(noisy.clean_clicks, sc.clean_clicks)
    flip_rate = np.mean(noisy.labels != noisy.clean_clicks)
    assert 0.15 < flip_rate < 0.25


def test_clicks_follow_the_latent_probability():
    sc = Scenario(ScenarioConfig(seed=0, label_noise=0.0, **SMALL))
    p = sc._click_p[sc.records[:, 1], sc.records[:, 2]]
    hi, lo = p > 0.7, p < 0.3
    assert sc.clean_clicks[hi].mean() > 0.6 > 0.4 > sc.clean_clicks[lo].mean()


def test_oracle_rank_sorted_by_probability():
    sc = Scenario(ScenarioConfig(seed=0, **SMALL))
    ranked = sc.oracle_rank("q7")
    probs = [sc.click_probability("q7", s) for s in ranked]
    assert probs == sorted(probs, reverse=True)
    assert sorted(ranked) == sorted(sc.service_ids)
    assert sc.oracle_label("q7", ranked[0]) == int(probs[0] >= 0.5)
    with pytest.raises(KeyError):
        sc.oracle_rank("q9999")


def test_default_scenario_is_skewed():
    sc = Scenario(ScenarioConfig(seed=0))
    assert sc.pv_share(0.01) >= 0.85


def test_split_is_chronological_8_1_1():
    sc = Scenario(ScenarioConfig(seed=0, **SMALL))
    sessions = sc.records[:, 0]
    for a, b in ((0, 1), (1, 2)):
        assert sessions[sc.period == a].max() < sessions[sc.period == b].min()
    counts = np.bincount(sc.period)
    assert counts[0] == pytest.approx(0.8 * len(sc.records), rel=0.02)


def test_written_dataset_loads(tmp_path):
    sc = generate(ScenarioConfig(seed=4, **SMALL), tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds.graph.queries) == SMALL["n_queries"]
    assert ds.forest.depth() == 5
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["n_train"] == len(ds.train)
    # exposure counts training-period sessions only
    assert sum(n.exposure for n in ds.graph.nodes.values() if n.kind == "query") == \
        int(round(0.8 * SMALL["sessions"]))
    for e in ds.graph.edges:
        if e.kind == "interaction":
            assert e.features[0] > 0
    assert sc.config.seed == 4


def test_every_tree_hosts_queries_and_services():
    sc = Scenario(ScenarioConfig(seed=0, n_trees=6, n_queries=12, n_services=8, sessions=100))
    roots = {sc.leaf_paths[int(x)][-1] for x in sc.q_leaf}
    assert len(roots) == 6
    assert len({sc.leaf_paths[int(x)][-1] for x in sc.s_leaf}) == 6


@pytest.mark.parametrize("bad", [
    dict(n_trees=50, n_queries=10),
    dict(max_depth=6),
    dict(label_noise=0.5),
    dict(zipf_exponent=0.0),
    dict(slate_size=500),
    dict(sessions=0),
])
def test_invalid_configs(bad):
    with pytest.raises(ScenarioError):
        Scenario(ScenarioConfig(**bad))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_exposure_equals_train_session_counts(seed):
    sc = Scenario(ScenarioConfig(seed=seed, n_queries=40, n_services=12, sessions=200))
    train = sc.records[sc.period == 0]
    per_query = {}
    for t, q, _ in train:
        per_query.setdefault(int(q), set()).add(int(t))
    for q in range(40):
        assert sc.exposure[q] == len(per_query.get(q, ()))
