import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walklearn import model as M
from walklearn.introspect import (NeuronReport, dump_images, neuron_activations, purity, rank_neurons,
                                  reports_json, top_neurons_per_class, write_pgm)
from walklearn.synthetic_world import WorldConfig, generate_world
from walklearn.track_store import ContextLabelSpec, GeoRegionSet, default_regions

SPEC = M.ModelSpec()


@pytest.fixture(scope="module")
def biased_world():
    regions = GeoRegionSet(list(default_regions())[:2])
    cfg = WorldConfig(n_identities=10, regions=regions, region_attribute_bias=1.0, seed=3)
    store, truth = generate_world(cfg, ContextLabelSpec(2))
    return store, truth, store.geo_labels(regions)


def test_hand_built_attribute_neuron_ranks_first(biased_world):
    store, truth, geo = biased_world
    bits = truth.aligned(store)[:, 0]
    rng = np.random.default_rng(0)
    acts = rng.uniform(0.0, 0.5, (len(store), 6))
    acts[:, 3] = bits  # fires exactly when attribute 0 is on
    reports = rank_neurons(acts, store.sample_ids, geo, n=1, k=3)
    aligned = int(geo[bits == 1][0])
    assert np.all(geo[bits == 1] == aligned)
    top = [r for r in reports if r.selected_for == aligned][0]
    assert top.neuron == 3
    assert purity([top], dict(zip(store.sample_ids.tolist(), geo.tolist()))) == 1.0


def test_constant_layer_falls_back_to_index_order():
    acts = np.ones((5, 4))
    reports = rank_neurons(acts, np.arange(10, 15), np.array([0, 0, 1, 1, 1]), n=3, k=2)
    assert [r.neuron for r in reports] == [0, 1, 2, 0, 1, 2]
    assert all(r.top_sample_ids == [10, 11] for r in reports)


def test_single_neuron_single_sample():
    acts = np.array([[0.2], [0.9]])
    reports = rank_neurons(acts, np.array([7, 8]), np.array([0, 1]), n=1, k=1)
    assert len(reports) == 2
    assert all(r.top_sample_ids == [8] and r.top_values == [0.9] for r in reports)


def test_class_means_recorded_per_class():
    acts = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
    (r0, r1) = rank_neurons(acts, np.array([1, 2, 3]), np.array([0, 0, 1]), n=1, k=1)
    assert (r0.neuron, r0.class_means) == (0, [2.0, 0.0])
    assert (r1.neuron, r1.class_means) == (1, [0.0, 5.0])


def test_max_ranking_differs_from_mean_ranking():
    acts = np.array([[6.0, 3.0], [0.0, 3.0], [0.0, 3.0]])
    labels = np.zeros(3, dtype=int)
    assert rank_neurons(acts, np.arange(3), labels, n=1, k=1)[0].neuron == 1
    assert rank_neurons(acts, np.arange(3), labels, n=1, k=1, use_max=True)[0].neuron == 0


def test_standardized_ranking_prefers_class_specific_units():
    # unit 0 is large everywhere, unit 1 is small but only fires for class 1
    acts = np.array([[10.0, 0.0], [10.0, 0.0], [11.0, 1.0], [11.0, 1.0]])
    labels = np.array([0, 0, 1, 1])
    acts[:, 0] += np.array([0.5, -0.5, 0.5, -0.5])
    assert rank_neurons(acts, np.arange(4), labels, n=1, k=1)[1].neuron == 0
    assert rank_neurons(acts, np.arange(4), labels, n=1, k=1, standardize=True)[1].neuron == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ranking_is_invariant_to_sample_order(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    # few distinct values so ties are common
    acts = rng.integers(0, 3, (n, 5)).astype(float)
    ids = rng.permutation(1000)[:n]
    labels = rng.integers(0, 3, n)
    perm = rng.permutation(n)
    a = rank_neurons(acts, ids, labels, n=2, k=3)
    b = rank_neurons(acts[perm], ids[perm], labels[perm], n=2, k=3)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]


def test_purity_counts_clean_reports():
    class_of = {1: 0, 2: 0, 3: 1}
    reports = [NeuronReport("s4", 0, 0, [], [1, 2]), NeuronReport("s4", 1, 0, [], [1, 3]),
               NeuronReport("s4", 2, 1, [], [3])]
    assert purity(reports, class_of) == pytest.approx(2 / 3)
    assert purity([], class_of) == 0.0


def test_report_validation():
    with pytest.raises(ValueError):
        NeuronReport("s4", 0, 0, [], [])
    with pytest.raises(ValueError):
        rank_neurons(np.zeros((2, 2)), np.arange(2), np.zeros(3), n=1, k=1)
    with pytest.raises(ValueError):
        rank_neurons(np.zeros((2, 2)), np.arange(2), np.zeros(2), n=0, k=1)


def test_network_ranking_on_a_real_layer(biased_world):
    store, _, geo = biased_world
    params = M.init_context(M.init_verification(SPEC, 0), "geo", 0)
    reports = top_neurons_per_class(params, store, "s4", geo, n=3, k=2)
    assert len(reports) == 6
    ids = set(store.sample_ids.tolist())
    for r in reports:
        assert 0 <= r.neuron < SPEC.s4_units
        assert set(r.top_sample_ids) <= ids
    acts = neuron_activations(params, store.images, "s1")
    assert acts.shape == (len(store), SPEC.conv1_filters)
    with pytest.raises(KeyError):
        top_neurons_per_class(params, store, "no_such_layer", geo)


def test_json_and_pgm_output(tmp_path, biased_world):
    store, _, geo = biased_world
    reports = rank_neurons(np.eye(len(store))[:, :3], store.sample_ids, geo, n=1, k=1, layer="x")
    doc = json.loads(reports_json(reports, layer="x"))
    assert doc["layer"] == "x" and len(doc["neurons"]) == len(reports)
    paths = dump_images(reports, store, tmp_path / "img")
    assert len(paths) == len(reports)
    raw = open(paths[0], "rb").read()
    h, w = SPEC.image_shape[:2]
    assert raw.startswith(f"P5\n{w} {h}\n255\n".encode()) and len(raw) == len(f"P5\n{w} {h}\n255\n") + h * w


def test_pgm_clips_and_rounds(tmp_path):
    p = tmp_path / "a.pgm"
    write_pgm(p, np.array([[-1.0, 0.5], [1.0, 2.0]]))
    assert open(p, "rb").read().endswith(bytes([0, 128, 255, 255]))
