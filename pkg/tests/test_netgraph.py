import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_contract, random_network
from tnml import DimensionError, InvalidSelectionError, StructuralError, Tensor, make_copy_node
from tnml.netgraph import (
    TensorNetwork,
    build_mps,
    chain_order,
    default_order,
    dumps_topology,
    effective_hypergraph,
    full_contract,
    greedy_order,
    loads_topology,
    mps_from_tensors,
    param_count,
    random_order,
)


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def random_mps(rng, n, d, f=2, c=3, p=0):
    net = build_mps(n, f, d, c, p)
    return mps_from_tensors([rng.standard_normal(net[i].shape) for i in range(n)], p)


class TestNetworkValidation:
    def test_extent_conflict(self):
        with pytest.raises(DimensionError):
            TensorNetwork({0: Tensor(np.ones(2), ("e",)), 1: Tensor(np.ones(3), ("e",))})

    def test_untagged_single_slot_edge(self):
        with pytest.raises(StructuralError):
            TensorNetwork({0: Tensor(np.ones(2), ("e",))})

    def test_external_edge_with_two_slots(self):
        with pytest.raises(StructuralError):
            TensorNetwork({0: Tensor(np.ones(2), ("e",)), 1: Tensor(np.ones(2), ("e",))},
                          {"e": "input"})

    def test_two_output_edges(self):
        with pytest.raises(StructuralError):
            TensorNetwork({0: Tensor(np.ones((2, 2)), ("a", "b"))}, {"a": "output", "b": "output"})

    def test_hyperedge_with_three_slots(self):
        t = {i: Tensor(np.ones(2), ("h",)) for i in range(3)}
        net = TensorNetwork(t)
        assert len(net.edges["h"].slots) == 3


class TestFullContract:
    def test_identity_chain_returns_basis_vector(self):
        nodes = {0: Tensor(np.eye(2), ("out", "b")), 1: Tensor(np.eye(2), ("b", "x"))}
        net = TensorNetwork(nodes, {"out": "output", "x": "input"})
        for k in range(2):
            basis = np.eye(2)[k]
            np.testing.assert_array_equal(full_contract(net, {"x": basis}).data, basis)

    def test_network_with_copy_node_matches_brute_force(self, rng):
        a = Tensor(rng.standard_normal((3, 2)), ("out", "h"))
        b = Tensor(rng.standard_normal((2, 2)), ("g", "x"))
        copy = make_copy_node(2, 2, ("h", "g"))
        net = TensorNetwork({0: a, 1: copy, 2: b}, {"out": "output", "x": "input"})
        x = rng.standard_normal(2)
        assert _rel(full_contract(net, {"x": x}).data, brute_force_contract(net, {"x": x})) < 1e-12

    def test_missing_input(self, rng):
        net = random_mps(rng, 3, 2)
        with pytest.raises(StructuralError):
            full_contract(net, {"x0": np.ones(2)})

    def test_extra_input(self, rng):
        net = random_mps(rng, 2, 2)
        with pytest.raises(StructuralError):
            full_contract(net, {"x0": np.ones(2), "x1": np.ones(2), "zz": np.ones(2)})

    def test_input_extent_mismatch(self, rng):
        net = random_mps(rng, 2, 2)
        with pytest.raises(DimensionError):
            full_contract(net, {"x0": np.ones(3), "x1": np.ones(2)})

    def test_bad_order(self, rng):
        net = random_mps(rng, 3, 2)
        inputs = {f"x{i}": np.ones(2) for i in range(3)}
        with pytest.raises(StructuralError):
            full_contract(net, inputs, order=[(0, 1)])

    def test_monitor_records_each_merge(self, rng):
        net = random_mps(rng, 4, 2)
        inputs = {f"x{i}": np.ones(2) for i in range(4)}
        seen = []
        full_contract(net, inputs, monitor=seen)
        assert len(seen) == 3 and all(v >= 0 for v in seen)

    def test_mps_default_order_is_chain(self, rng):
        net = random_mps(rng, 5, 2, p=2)
        assert list(default_order(net)) == list(chain_order(net))
        inputs = {f"x{i}": rng.standard_normal(2) for i in range(5)}
        ref = full_contract(net, inputs, order=greedy_order(net)).data
        assert _rel(full_contract(net, inputs).data, ref) < 1e-12

    def test_brute_force_on_random_networks(self):
        r = np.random.default_rng(7)
        for _ in range(20):
            net, inputs = random_network(r)
            got = full_contract(net, inputs).aligned((net.output_edge,))
            assert _rel(got, brute_force_contract(net, inputs)) < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_order_invariance(self, seed):
        r = np.random.default_rng(seed)
        net, inputs = random_network(r, max_nodes=6)
        py = random.Random(seed)
        a = full_contract(net, inputs, order=random_order(net, py)).aligned((net.output_edge,))
        b = full_contract(net, inputs, order=random_order(net, py)).aligned((net.output_edge,))
        assert _rel(a, b) < 1e-10


class TestEffectiveHypergraph:
    def chain(self, n, d=2):
        # plain chain without external legs
        nodes = {}
        for i in range(n):
            labels = ([f"e{i - 1}"] if i else []) + ([f"e{i}"] if i < n - 1 else [])
            nodes[i] = Tensor(np.ones([d] * len(labels)), labels)
        return TensorNetwork(nodes)

    def test_four_node_chain_one_copy(self):
        v, e, sub = effective_hypergraph(self.chain(4), {1})
        assert (v, e) == (3, 2)
        assert set(sub.nodes) == {0, 2, 3}
        merged = set(sub[0].labels) & set(sub[2].labels)
        assert len(merged) == 1

    def test_empty_copy_set(self, rng):
        net = random_mps(rng, 4, 3)
        v, e, sub = effective_hypergraph(net, set())
        assert (v, e) == (4, 3)
        assert all(sub[n] == net[n] for n in net.nodes)

    def test_inner_nodes_copied(self):
        v, e, sub = effective_hypergraph(self.chain(3), {1})
        assert (v, e) == (2, 1)

    def test_copy_chain_merges_transitively(self):
        v, e, _ = effective_hypergraph(self.chain(5), {1, 2, 3})
        assert (v, e) == (2, 1)

    def test_output_node_cannot_be_copied(self, rng):
        net = random_mps(rng, 3, 2)
        with pytest.raises(InvalidSelectionError):
            effective_hypergraph(net, {0})

    def test_idempotent(self, rng):
        net = random_mps(rng, 5, 2)
        v, e, sub = effective_hypergraph(net, {2, 3})
        v2, e2, sub2 = effective_hypergraph(sub, set())
        assert (v2, e2) == (v, e)
        assert set(sub2.nodes) == set(sub.nodes)


class TestBuildMps:
    def test_shapes(self):
        net = build_mps(3, 2, 4, 10, 0)
        assert [net[i].shape for i in range(3)] == [(10, 2, 4), (4, 2, 4), (4, 2)]

    def test_two_sites(self):
        net = build_mps(2, 2, 4, 10, 0)
        assert [net[i].shape for i in range(2)] == [(10, 2, 4), (4, 2)]

    def test_param_count(self):
        assert param_count(build_mps(3, 2, 4, 10, 0)) == 120

    def test_param_count_edge_cases(self):
        net = build_mps(3, 2, 4, 10, 0)
        frozen = TensorNetwork(net.nodes, net.external_tags(), frozen=set(net.nodes))
        assert param_count(frozen, trainable=True) == 0
        single = TensorNetwork({0: Tensor(np.ones((3, 3)), ("a", "b"))},
                               {"a": "input", "b": "output"})
        assert param_count(single) == 9

    def test_output_site_placement(self):
        net = build_mps(4, 2, 3, 5, 2)
        assert net.output_node == 2 and net[2].shape == (3, 5, 2, 3)

    @pytest.mark.parametrize("args", [(1, 2, 2, 2, 0), (3, 2, 2, 2, 3), (3, 2, 0, 2, 0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            build_mps(*args)

    def test_heterogeneous_bonds(self):
        net = build_mps(3, 2, [2, 5], 3)
        assert net[1].shape == (2, 2, 5)


class TestTopologyText:
    def test_round_trip(self, rng):
        net = random_mps(rng, 4, 3, p=1)
        text = dumps_topology(net)
        back = loads_topology(text, {i: np.asarray(net[i].data) for i in range(4)})
        assert back.meta == net.meta
        assert all(back[n] == net[n] for n in net.nodes)
        assert back.external_tags() == net.external_tags()

    def test_shape_mismatch(self, rng):
        net = random_mps(rng, 2, 2)
        with pytest.raises(DimensionError):
            loads_topology(dumps_topology(net), {0: np.ones((4, 2, 2)), 1: np.ones((2, 2))})

    def test_not_a_topology(self):
        with pytest.raises(StructuralError):
            loads_topology('{"hello": 1}\n')
