import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridveil import grid
from gridveil.grid import (
    Edge,
    NetworkError,
    NominalPoint,
    build_laplacian,
    check_network,
    derive_edge_weights,
    incidence_matrix,
    load_network,
    network_from_dict,
    network_to_dict,
    save_network,
)

from conftest import random_network

STAR_EDGES = [Edge(0, 4, 4.0), Edge(1, 4, 10.0), Edge(2, 4, 16.0), Edge(3, 4, 10.0)]


def test_star_laplacian_entries():
    K = build_laplacian(STAR_EDGES, 5)
    assert K[4, 4] == -40
    assert K[0, 4] == 4 and K[4, 0] == 4
    assert K[0, 0] == -4


def test_empty_edges_give_zero_matrix():
    assert np.array_equal(build_laplacian([], 3), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_laplacian_rows_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    model = random_network(rng, 3, 3)
    K = model.laplacian()
    assert np.array_equal(K, K.T)
    # brute-force row sums
    for i in range(model.n):
        assert abs(sum(K[i, j] for j in range(model.n))) <= 1e-12
    C = incidence_matrix(model.edges, model.n)
    assert np.allclose(-C @ np.diag(model.weights) @ C.T, K, atol=1e-12, rtol=0)


@pytest.mark.parametrize(
    "edges, code",
    [
        ([Edge(0, 1, 1.0), Edge(1, 0, 2.0)], grid.DUPLICATE_EDGE),
        ([Edge(1, 1, 1.0)], grid.SELF_LOOP),
        ([Edge(0, 1, 0.0)], grid.NONPOSITIVE_WEIGHT),
        ([Edge(0, 1, -2.0)], grid.NONPOSITIVE_WEIGHT),
        ([Edge(0, 5, 1.0)], grid.NODE_INDEX),
    ],
)
def test_bad_edges_rejected(edges, code):
    with pytest.raises(NetworkError) as info:
        build_laplacian(edges, 3)
    assert info.value.code == code


def test_derive_weights_flat_and_angled():
    (e,) = derive_edge_weights({(0, 1): 0.25}, NominalPoint.flat(2))
    assert e.k == pytest.approx(4.0, abs=1e-15)
    (e,) = derive_edge_weights({(0, 1): 0.5}, NominalPoint(np.ones(2), np.array([np.pi / 3, 0.0])))
    assert e.k == pytest.approx(1.0, abs=1e-12)


def test_derive_weights_errors():
    with pytest.raises(NetworkError, match=grid.BAD_REACTANCE):
        derive_edge_weights({(0, 1): 0.0}, NominalPoint.flat(2))
    with pytest.raises(NetworkError, match=grid.ANGLE_SPREAD):
        derive_edge_weights({(0, 1): 0.1}, NominalPoint(np.ones(2), np.array([2.0, 0.0])))
    with pytest.raises(NetworkError, match=grid.BAD_VOLTAGE):
        NominalPoint(np.array([1.0, 0.0]), np.zeros(2))


def test_incidence_examples():
    assert incidence_matrix([Edge(0, 1, 1.0)], 2)[:, 0].tolist() == [1.0, -1.0]
    C = incidence_matrix(STAR_EDGES, 5)
    assert np.array_equal(C @ np.diag([4.0, 10, 16, 10]) @ C.T, -build_laplacian(STAR_EDGES, 5))
    pairs = grid.complete_graph_pairs(4)
    C4 = grid.pair_incidence(pairs, 4)
    assert C4.shape == (4, 6) and np.all(C4.sum(axis=0) == 0)


def test_ieee30_dataset(ieee30):
    assert ieee30.n == 30
    kinds = [e.kind for e in ieee30.edges]
    assert kinds.count("line") == 37 and kinds.count("transformer") == 4
    assert sum(n.is_generator for n in ieee30.nodes) == 6
    assert ieee30.loads.sum() == pytest.approx(2.834, abs=1e-12)
    # weights are 1/x at the flat nominal point
    for e in ieee30.edges:
        assert e.k == pytest.approx(1.0 / ieee30.reactances[(e.src, e.dst)], rel=1e-15)
    assert [ieee30.nodes[i].id for i in ieee30.boundary] == [1, 2, 5, 8, 11, 13]


def test_ieee30_needs_its_transformers(ieee30):
    lines_only = [e for e in ieee30.edges if e.kind == "line"]
    assert not grid._is_connected(ieee30.n, lines_only)


def test_round_trip(tmp_path):
    model = random_network(np.random.default_rng(3), 4, 4)
    path = tmp_path / "net.json"
    save_network(model, path)
    again = load_network(path)
    assert again.nodes == model.nodes and again.edges == model.edges
    assert again.boundary == model.boundary and again.interior == model.interior


def _star_dict():
    return network_to_dict(grid.bundled("star5"))


def test_weights_take_precedence_over_reactance():
    data = _star_dict()
    data["edges"][0]["x"] = 0.5
    assert network_from_dict(data).edges[0].k == 4.0
    del data["edges"][0]["k"]
    assert network_from_dict(data).edges[0].k == pytest.approx(2.0)


def test_nominal_point_from_file():
    data = _star_dict()
    for e in data["edges"]:
        e.pop("k")
        e["x"] = 1.0
    data["nominal"] = {"v0": [1.0, 1.0, 1.0, 1.0, 2.0], "delta0": [0.0] * 5}
    assert network_from_dict(data).weights.tolist() == [2.0, 2.0, 2.0, 2.0]


def _mutated(fn):
    data = _star_dict()
    fn(data)
    return data


@pytest.mark.parametrize(
    "mutate, code",
    [
        (lambda d: d.update(boundary=[1, 2, 3], interior=[4, 5]), grid.GENERATOR_INTERIOR),
        (lambda d: d.update(interior=[4, 5]), grid.PARTITION_OVERLAP),
        (lambda d: d.update(interior=[]), grid.PARTITION_INCOMPLETE),
        (lambda d: d["nodes"][4].update(d=1.0), grid.INTERIOR_DAMPING),
        (lambda d: d["nodes"][0].update(m=0.0), grid.GENERATOR_PARAMS),
        (lambda d: d["nodes"][4].update(m=2.0), grid.LOAD_NODE_PARAMS),
        (lambda d: d.update(edges=d["edges"][:3]), grid.DISCONNECTED),
        (lambda d: d["edges"].append({"from": 1, "to": 99, "k": 1.0}), grid.NODE_INDEX),
        (lambda d: d["edges"].append({"from": 1, "to": 2}), grid.MALFORMED),
    ],
)
def test_validation_codes(mutate, code):
    with pytest.raises(NetworkError) as info:
        network_from_dict(_mutated(mutate))
    assert info.value.code == code


def test_check_network_collects_all():
    data = _mutated(lambda d: (d["nodes"][4].update(d=1.0), d.update(edges=d["edges"][:3])))
    codes = {e.code for e in check_network(network_from_dict(data, validate=False))}
    assert codes == {grid.INTERIOR_DAMPING, grid.DISCONNECTED}


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(NetworkError, match=grid.MALFORMED):
        load_network(path)
    path.write_text(json.dumps([1, 2]))
    with pytest.raises(NetworkError, match=grid.MALFORMED):
        load_network(path)


def test_droop_convention(star):
    import dataclasses

    assert np.allclose(star.droop_gains(star.boundary), 0.04)
    inv = dataclasses.replace(star, droop_is_inverse=True)
    assert np.allclose(inv.droop_gains(inv.boundary), 25.0)
