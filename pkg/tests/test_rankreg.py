import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnml import StructuralError, Tensor
from tnml.netgraph import TensorNetwork, build_mps, full_contract, mps_from_tensors, param_count
from tnml.rankreg import (
    RankRegularizer,
    forward_flops,
    full_param_count,
    hard_masked,
    insert_regularizers,
    mask_derivative,
    mask_diagonal,
    penalized_loss,
    penalty,
    penalty_grad,
    refresh,
    soft_param_count,
    soft_param_count_grad,
    truncate_and_absorb,
    truncated_dims,
    write_spectrum,
)


def random_mps(rng, n, d, f=2, c=3, p=0):
    net = build_mps(n, f, d, c, p)
    return mps_from_tensors([rng.standard_normal(net[i].shape) for i in range(n)], p)


def inputs_for(rng, n, f=2):
    return {f"x{i}": rng.standard_normal(f) for i in range(n)}


def _rel(a, b):
    return float(np.max(np.abs(np.asarray(a) - b)) / np.max(np.abs(b)))


class TestMask:
    def test_identity_limit(self):
        assert np.all(mask_diagonal(4.0, 4, 50.0) >= 1 - 1e-9)

    def test_fully_masked_limit(self):
        assert np.all(mask_diagonal(0.0, 4, 50.0) <= 1e-9)

    def test_values_at_half_width(self):
        m = mask_diagonal(2.0, 4, 10.0)
        expected = 1.0 / (1.0 + np.exp(-10.0 * (2.0 - np.arange(4) - 0.5)))
        np.testing.assert_allclose(m, expected, rtol=1e-14)
        np.testing.assert_allclose(m, [0.99999969, 0.9933, 0.0067, 0.00000031], atol=5e-5)

    @settings(max_examples=50, deadline=None)
    @given(d=st.floats(0, 8), gamma=st.floats(0.5, 50), dim=st.integers(1, 8))
    def test_monotone_in_index(self, d, gamma, dim):
        m = mask_diagonal(min(d, dim), dim, gamma)
        assert np.all(np.diff(m) <= 0)
        assert np.all((m >= 0) & (m <= 1))

    @pytest.mark.parametrize("d", [0.4, 1.5, 2.7])
    def test_derivative(self, d):
        h = 1e-6
        fd = (mask_diagonal(d + h, 4, 7.0) - mask_diagonal(d - h, 4, 7.0)) / (2 * h)
        np.testing.assert_allclose(mask_derivative(d, 4, 7.0), fd, rtol=1e-6, atol=1e-10)

    def test_integer_soft_dim_counts_indices(self):
        for d in range(5):
            assert np.count_nonzero(mask_diagonal(float(d), 4, 10.0) > 0.5) == d

    def test_regularizer_clamps(self):
        assert RankRegularizer("e", 9.0, 4).soft_dim == 4.0
        assert RankRegularizer("e", -1.0, 4).soft_dim == 0.0
        with pytest.raises(ValueError):
            RankRegularizer("e", 1.0, 4, gamma=0.0)


class TestInsert:
    def test_one_per_bond(self, rng):
        net = random_mps(rng, 6, 3)
        rnet, regs = insert_regularizers(net)
        assert len(regs) == 5
        assert len(rnet) == 11

    def test_near_identity_keeps_logits(self, rng):
        net = random_mps(rng, 5, 3, p=2)
        rnet, regs = insert_regularizers(net, gamma=50.0)
        x = inputs_for(rng, 5)
        assert _rel(full_contract(rnet, x).data, full_contract(net, x).data) < 1e-7

    def test_exact_identity_keeps_logits(self, rng):
        net = random_mps(rng, 5, 3, p=2)
        rnet, regs = insert_regularizers(net)
        ident = rnet.replace({r.node: Tensor(np.eye(3), rnet[r.node].labels) for r in regs})
        x = inputs_for(rng, 5)
        assert _rel(full_contract(ident, x).data, full_contract(net, x).data) < 1e-12

    def test_no_internal_edges(self):
        net = TensorNetwork({0: Tensor(np.ones((2, 3)), ("x", "out"))},
                            {"x": "input", "out": "output"})
        with pytest.raises(StructuralError):
            insert_regularizers(net)

    def test_hyperedge_gets_one_mask(self, rng):
        nodes = {i: Tensor(rng.standard_normal((3, 2)), ("h", f"x{i}")) for i in range(3)}
        nodes[3] = Tensor(rng.standard_normal((3, 2)), ("h", "out"))
        net = TensorNetwork(nodes, {**{f"x{i}": "input" for i in range(3)}, "out": "output"})
        rnet, regs = insert_regularizers(net, soft_dim=1.5)
        assert len(regs) == 1 and regs[0].kind == "vector"
        x = inputs_for(rng, 3)
        m = regs[0].mask()
        a = [nodes[i].data @ x[f"x{i}"] for i in range(3)]
        expected = np.einsum("h,h,h,h,ho->o", m, *a, nodes[3].data)
        np.testing.assert_allclose(full_contract(rnet, x).data, expected, rtol=1e-12)

    def test_refresh_rebuilds_masks(self, rng):
        rnet, regs = insert_regularizers(random_mps(rng, 3, 4))
        regs[0].soft_dim = 1.0
        fresh = refresh(rnet, regs)
        np.testing.assert_array_equal(np.diag(fresh[regs[0].node].data), regs[0].mask())


class TestSoftParamCount:
    def test_identity_masks_give_full_count(self, rng):
        net = build_mps(3, 2, 4, 10)
        rnet, regs = insert_regularizers(net, gamma=1e4)
        assert soft_param_count(rnet, regs) == pytest.approx(param_count(net), rel=1e-12)
        assert full_param_count(rnet) == 120

    def test_softened_to_two(self):
        net = build_mps(3, 2, 4, 10)
        rnet, regs = insert_regularizers(net, gamma=1e4, soft_dim=2.0)
        assert soft_param_count(rnet, regs) == pytest.approx(10 * 2 * 2 + 2 * 2 * 2 + 2 * 2,
                                                             rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(d=st.floats(0.1, 3.5), which=st.integers(0, 2))
    def test_monotone_in_soft_dim(self, d, which):
        rnet, regs = insert_regularizers(build_mps(4, 2, 4, 3), gamma=3.0, soft_dim=d)
        before = soft_param_count(rnet, regs)
        regs[which].soft_dim += 0.3
        assert soft_param_count(rnet, regs) > before

    def test_gradient(self):
        rnet, regs = insert_regularizers(build_mps(4, 2, 4, 3, 1), gamma=6.0)
        for r, d in zip(regs, (1.3, 2.6, 3.1)):
            r.soft_dim = d
        grads = soft_param_count_grad(rnet, regs)
        h = 1e-6
        for r in regs:
            d0 = r.soft_dim
            r.soft_dim = d0 + h
            up = soft_param_count(rnet, regs)
            r.soft_dim = d0 - h
            down = soft_param_count(rnet, regs)
            r.soft_dim = d0
            assert grads[r.edge] == pytest.approx((up - down) / (2 * h), rel=1e-6)


class TestPenalty:
    def test_zero_lambda(self):
        rnet, regs = insert_regularizers(build_mps(3, 2, 4, 10), soft_dim=1.3)
        assert penalized_loss(0.7, rnet, regs, 0.0) == 0.7

    def test_identity_masks_add_lambda(self):
        rnet, regs = insert_regularizers(build_mps(3, 2, 4, 10), gamma=1e4)
        assert penalized_loss(0.7, rnet, regs, 0.25) == pytest.approx(0.95, rel=1e-12)

    def test_negative_lambda(self):
        rnet, regs = insert_regularizers(build_mps(3, 2, 4, 10))
        with pytest.raises(ValueError):
            penalty(rnet, regs, -1.0)

    @pytest.mark.parametrize("kind", ["params", "l1", "l2"])
    def test_gradient_matches_finite_differences(self, kind):
        rnet, regs = insert_regularizers(build_mps(5, 2, 3, 4, 2), gamma=9.0)
        for r, d in zip(regs, (0.8, 1.9, 2.2, 1.4)):
            r.soft_dim = d
        grads = penalty_grad(rnet, regs, 0.3, kind)
        h = 1e-6
        for r in regs:
            d0 = r.soft_dim
            r.soft_dim = d0 + h
            up = penalty(rnet, regs, 0.3, kind)
            r.soft_dim = d0 - h
            down = penalty(rnet, regs, 0.3, kind)
            r.soft_dim = d0
            assert grads[r.edge] == pytest.approx((up - down) / (2 * h), rel=1e-6)


class TestTruncate:
    def test_identity_masks(self, rng):
        net = random_mps(rng, 5, 3, p=1)
        rnet, regs = insert_regularizers(net, gamma=50.0)
        out = truncate_and_absorb(rnet, regs)
        assert not [n for n in out.nodes if isinstance(n, tuple)]
        x = inputs_for(rng, 5)
        assert _rel(full_contract(out, x).data, full_contract(net, x).data) < 1e-7
        assert param_count(out) == param_count(net)

    def test_soft_dim_two_matches_hard_mask(self, rng):
        net = random_mps(rng, 4, 4, p=0)
        rnet, regs = insert_regularizers(net, gamma=50.0)
        regs[1].soft_dim = 2.0
        rnet = refresh(rnet, regs)
        out = truncate_and_absorb(rnet, regs)
        assert out.edges["b1"].dim == 2
        hard = hard_masked(rnet, regs)
        for _ in range(10):
            x = inputs_for(rng, 4)
            assert _rel(full_contract(out, x).data, full_contract(hard, x).data) < 1e-12
        assert param_count(out) < param_count(net)

    def test_tiny_soft_dim_keeps_one_index(self, rng):
        rnet, regs = insert_regularizers(random_mps(rng, 3, 4), gamma=10.0)
        regs[0].soft_dim = 0.3
        assert truncated_dims(regs)["b0"] == 1
        out = truncate_and_absorb(refresh(rnet, regs), regs)
        assert out.edges["b0"].dim == 1

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_equivalence_and_cost(self, seed):
        r = np.random.default_rng(seed)
        n, d = int(r.integers(2, 7)), int(r.integers(1, 5))
        net = random_mps(r, n, d, p=int(r.integers(n)))
        rnet, regs = insert_regularizers(net, gamma=float(r.uniform(2, 50)))
        for reg in regs:
            reg.soft_dim = float(r.uniform(0, d))
        rnet = refresh(rnet, regs)
        out = truncate_and_absorb(rnet, regs)
        hard = hard_masked(rnet, regs)
        x = inputs_for(r, n)
        ref = full_contract(hard, x).data
        got = full_contract(out, x).data
        assert np.max(np.abs(got - ref)) <= 1e-12 * max(np.max(np.abs(ref)), 1e-300)
        assert param_count(out) <= full_param_count(rnet)
        assert forward_flops(out) <= forward_flops(net)

    def test_unrounded_absorbs_sigmoid_values(self, rng):
        net = random_mps(rng, 3, 3)
        rnet, regs = insert_regularizers(net, gamma=4.0, soft_dim=2.4)
        soft = truncate_and_absorb(rnet, regs, rounded=False)
        x = inputs_for(rng, 3)
        # dropped entries are the only difference from the soft network
        kept = [np.flatnonzero(r.mask() >= 0.5) for r in regs]
        masked = rnet.replace({r.node: Tensor(np.diag(np.where(np.isin(np.arange(3), k),
                                                              r.mask(), 0.0)),
                                              rnet[r.node].labels)
                               for r, k in zip(regs, kept)})
        assert _rel(full_contract(soft, x).data, full_contract(masked, x).data) < 1e-12


class TestSpectrum:
    def test_csv(self, tmp_path, rng):
        rnet, regs = insert_regularizers(random_mps(rng, 4, 5))
        for r, d in zip(regs, (5.0, 2.2, 0.1)):
            r.soft_dim = d
        path = tmp_path / "spectrum.csv"
        write_spectrum(path, regs)
        rows = list(csv.DictReader(open(path)))
        assert [int(r["edge_index"]) for r in rows] == [0, 1, 2]
        assert [int(r["truncated_dim"]) for r in rows] == [5, 2, 1]
        assert float(rows[1]["soft_dim"]) == pytest.approx(2.2)
