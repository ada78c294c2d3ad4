import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbla.aggregate import (AggregationDefect, ClientUpdate, aggregate_biases, fedavg, fft_aggregate,
                            rbla_aggregate, slice_indicator, zero_pad, zp_aggregate)
from rbla.linalg import ShapeError
from rbla.lora import LoraAdapter

from .helpers import brute_aggregate


def update(cid, B, A, w=1.0, bias=None):
    ad = LoraAdapter(np.asarray(B, dtype=float), np.asarray(A, dtype=float))
    bias = np.zeros((1, ad.layer_shape[1])) if bias is None else np.asarray(bias, dtype=float)
    return ClientUpdate(cid, [ad], [bias], w)


def constant_update(cid, rank, value=1.0, w=1.0, m=4, n=3):
    return update(cid, np.full((m, rank), value), np.full((rank, n), value), w)


def random_updates(gen, ranks, m, n, weights=None):
    weights = weights if weights is not None else gen.uniform(0.5, 5.0, size=len(ranks))
    return [update(i + 1, gen.normal(size=(m, r)), gen.normal(size=(r, n)), float(w))
            for i, (r, w) in enumerate(zip(ranks, weights))]


def as_triples(updates):
    return [(u.layers[0].B.tolist(), u.layers[0].A.tolist(), u.weight) for u in updates]


# fedavg

def test_fedavg_cases():
    x = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_array_equal(fedavg([x], [7.0]), x)
    np.testing.assert_array_equal(fedavg([np.zeros((2, 2)), np.ones((2, 2))], [1, 1]), 0.5)
    mats = [np.full((2, 2), v) for v in (1.0, 4.0, -2.0)]
    np.testing.assert_allclose(fedavg(mats, [1, 2, 3]), (1 * 1 + 2 * 4 + 3 * -2) / 6, atol=1e-15)


@pytest.mark.parametrize("params,weights,exc", [
    ([], [], ValueError),
    ([np.ones((2, 2)), np.ones((2, 3))], [1, 1], ShapeError),
    ([np.ones((2, 2))], [0.0], ValueError),
    ([np.ones((2, 2))], [-1.0], ValueError),
])
def test_fedavg_errors(params, weights, exc):
    with pytest.raises(exc):
        fedavg(params, weights)


# zero padding

def test_zero_pad():
    out = zero_pad(np.ones((2, 3)), 3, 3)
    np.testing.assert_array_equal(out, [[1, 1, 1], [1, 1, 1], [0, 0, 0]])
    x = np.arange(4.0).reshape(2, 2)
    np.testing.assert_array_equal(zero_pad(x, 2, 2), x)
    np.testing.assert_array_equal(zero_pad(np.array([[5.0]]), 2, 2), [[5, 0], [0, 0]])
    with pytest.raises(ShapeError):
        zero_pad(np.ones((3, 3)), 2, 3)


def test_zp_dilutes_unshared_slice():
    ups = [constant_update(1, 2), constant_update(2, 3)]
    out = zp_aggregate(ups, 0)
    np.testing.assert_array_equal(out.B[:, :2], 1.0)
    np.testing.assert_array_equal(out.B[:, 2], 0.5)
    np.testing.assert_array_equal(out.A[2], 0.5)


def test_zp_one_low_rank_client_among_equal_peers():
    ups = [constant_update(1, 1), constant_update(2, 3), constant_update(3, 3)]
    out = zp_aggregate(ups, 0)
    np.testing.assert_allclose(out.B[:, 1:], 2 / 3, atol=1e-15)
    np.testing.assert_allclose(out.A[1:], 2 / 3, atol=1e-15)
    np.testing.assert_array_equal(out.B[:, 0], 1.0)


# rank-based

def test_rbla_preserves_unshared_slice():
    ups = [constant_update(1, 2), constant_update(2, 3)]
    out = rbla_aggregate(ups, 0)
    np.testing.assert_array_equal(out.B, 1.0)
    np.testing.assert_array_equal(out.A, 1.0)


def test_rbla_weights_123_ranks_123():
    gen = np.random.default_rng(1)
    ups = random_updates(gen, [1, 2, 3], 4, 3, weights=[1.0, 2.0, 3.0])
    out = rbla_aggregate(ups, 0)
    B = [u.layers[0].B for u in ups]
    A = [u.layers[0].A for u in ups]
    np.testing.assert_allclose(out.B[:, 0], (1 * B[0][:, 0] + 2 * B[1][:, 0] + 3 * B[2][:, 0]) / 6, atol=1e-14)
    np.testing.assert_allclose(out.A[1], (2 * A[1][1] + 3 * A[2][1]) / 5, atol=1e-14)
    np.testing.assert_array_equal(out.B[:, 2], B[2][:, 2])
    np.testing.assert_array_equal(out.A[2], A[2][2])


def test_slice_indicator():
    np.testing.assert_array_equal(slice_indicator([1, 3], 3), [[1, 0, 0], [1, 1, 1]])


@pytest.mark.parametrize("seed", range(20))
def test_both_rules_match_brute_force(seed):
    gen = np.random.default_rng(seed)
    m, n = gen.integers(1, 7, size=2)
    k = int(gen.integers(1, 5))
    ranks = gen.integers(1, min(m, n, 5) + 1, size=k)
    ups = random_updates(gen, ranks, m, n)
    for rule, fn in (("rbla", rbla_aggregate), ("zp", zp_aggregate)):
        B, A = brute_aggregate(as_triples(ups), rule)
        out = fn(ups, 0)
        assert np.abs(out.B - B).max() < 1e-12
        assert np.abs(out.A - A).max() < 1e-12


def test_rank_homogeneous_collapse():
    gen = np.random.default_rng(2)
    ups = random_updates(gen, [3, 3, 3], 5, 4)
    r, z = rbla_aggregate(ups, 0), zp_aggregate(ups, 0)
    fb = fedavg([u.layers[0].B for u in ups], [u.weight for u in ups])
    fa = fedavg([u.layers[0].A for u in ups], [u.weight for u in ups])
    for got in (r, z):
        assert np.abs(got.B - fb).max() < 1e-12
        assert np.abs(got.A - fa).max() < 1e-12


def test_dilution_law():
    # constant slices: zp slice r == (weight of holders / total weight) * rbla slice r
    ws = [2.0, 5.0, 3.0]
    ups = [constant_update(1, 1, 0.7, ws[0]), constant_update(2, 2, 0.7, ws[1]), constant_update(3, 3, 0.7, ws[2])]
    r, z = rbla_aggregate(ups, 0), zp_aggregate(ups, 0)
    for s in range(3):
        frac = sum(w for w, rank in zip(ws, [1, 2, 3]) if rank > s) / sum(ws)
        np.testing.assert_allclose(z.B[:, s], frac * r.B[:, s], atol=1e-15)
        np.testing.assert_allclose(z.A[s], frac * r.A[s], atol=1e-15)


def test_sole_contributor_is_bit_exact():
    gen = np.random.default_rng(3)
    ups = random_updates(gen, [1, 2, 4], 6, 5, weights=[3.0, 7.0, 0.1])
    out = rbla_aggregate(ups, 0)
    top = ups[2].layers[0]
    assert np.array_equal(out.B[:, 2:], top.B[:, 2:])
    assert np.array_equal(out.A[2:], top.A[2:])


def test_two_identical_clients_return_the_update():
    gen = np.random.default_rng(4)
    B, A = gen.normal(size=(4, 2)), gen.normal(size=(2, 3))
    out = rbla_aggregate([update(1, B, A, 10.0), update(2, B, A, 10.0)], 0)
    assert np.array_equal(out.B, B) and np.array_equal(out.A, A)


def test_missing_slice_without_previous_is_a_defect():
    ups = [constant_update(1, 1), constant_update(2, 2)]
    with pytest.raises(AggregationDefect):
        rbla_aggregate(ups, 0, target_rank=3)


def test_missing_slice_keeps_previous_value():
    prev = LoraAdapter(np.full((4, 3), 9.0), np.full((3, 3), -9.0))
    out = rbla_aggregate([constant_update(1, 1)], 0, target_rank=3, previous=prev)
    np.testing.assert_array_equal(out.B[:, 0], 1.0)
    np.testing.assert_array_equal(out.B[:, 1:], 9.0)
    np.testing.assert_array_equal(out.A[1:], -9.0)


def test_aggregate_biases():
    b = lambda v: np.full((1, 3), float(v))  # noqa: E731
    one = [update(1, np.ones((4, 1)), np.ones((1, 3)), 1.0, b(5))]
    np.testing.assert_array_equal(aggregate_biases(one, 0), 5.0)
    two = [update(1, np.ones((4, 1)), np.ones((1, 3)), 1.0, b(0)), update(2, np.ones((4, 1)), np.ones((1, 3)), 1.0, b(2))]
    np.testing.assert_array_equal(aggregate_biases(two, 0), 1.0)
    w13 = [update(1, np.ones((4, 1)), np.ones((1, 3)), 1.0, b(0)), update(2, np.ones((4, 1)), np.ones((1, 3)), 3.0, b(4))]
    np.testing.assert_array_equal(aggregate_biases(w13, 0), 3.0)


def test_fft_aggregate_over_full_weights():
    ups = [ClientUpdate(1, [np.zeros((2, 2))], [np.zeros((1, 2))], 1.0),
           ClientUpdate(2, [np.full((2, 2), 4.0)], [np.zeros((1, 2))], 3.0)]
    np.testing.assert_array_equal(fft_aggregate(ups, 0), 3.0)


def test_update_validation():
    with pytest.raises(ValueError):
        constant_update(1, 2, w=0.0)
    with pytest.raises(ValueError):
        rbla_aggregate([], 0)
    with pytest.raises(ValueError):
        rbla_aggregate([constant_update(1, 1), constant_update(1, 2)], 0)
    with pytest.raises(ShapeError):
        rbla_aggregate([constant_update(1, 1), constant_update(2, 1, m=5)], 0)


# properties

ranks_st = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(ranks=ranks_st, seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
def test_weight_scale_invariance(ranks, seed, scale):
    gen = np.random.default_rng(seed)
    ups = random_updates(gen, ranks, 5, 4)
    scaled = [ClientUpdate(u.client_id, u.layers, u.biases, u.weight * scale) for u in ups]
    for fn in (rbla_aggregate, zp_aggregate):
        a, b = fn(ups, 0), fn(scaled, 0)
        assert np.abs(a.B - b.B).max() < 1e-12 and np.abs(a.A - b.A).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(ranks=ranks_st, seed=st.integers(0, 2**32 - 1), perm_seed=st.integers(0, 1000))
def test_order_invariance(ranks, seed, perm_seed):
    gen = np.random.default_rng(seed)
    ups = random_updates(gen, ranks, 5, 4)
    shuffled = [ups[i] for i in np.random.default_rng(perm_seed).permutation(len(ups))]
    for fn in (rbla_aggregate, zp_aggregate):
        a, b = fn(ups, 0), fn(shuffled, 0)
        assert np.array_equal(a.B, b.B) and np.array_equal(a.A, b.A)


@settings(max_examples=60, deadline=None)
@given(ranks=ranks_st, seed=st.integers(0, 2**32 - 1))
def test_rbla_slices_are_convex_combinations(ranks, seed):
    gen = np.random.default_rng(seed)
    ups = random_updates(gen, ranks, 5, 4)
    out = rbla_aggregate(ups, 0)
    for r in range(out.rank):
        holders = [u.layers[0] for u in ups if u.layers[0].rank > r]
        Bs = np.stack([h.B[:, r] for h in holders])
        As = np.stack([h.A[r] for h in holders])
        assert (out.B[:, r] >= Bs.min(0) - 1e-12).all() and (out.B[:, r] <= Bs.max(0) + 1e-12).all()
        assert (out.A[r] >= As.min(0) - 1e-12).all() and (out.A[r] <= As.max(0) + 1e-12).all()
