from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esc_codec import numerics as nx
from esc_codec.numerics import Tensor
from esc_codec.vq import ProductVQ, code_histogram, nearest_codes, quantize_frame, utilization, vq_loss


def brute_force_codes(queries, codebook):
    """Exhaustive search with explicit lowest-index tie breaking."""
    l, m, _ = queries.shape
    out = np.zeros((l, m), dtype=np.int64)
    for g in range(l):
        for i in range(m):
            best, best_d = 0, np.inf
            for k in range(codebook.shape[1]):
                d = float(np.sum((queries[g, i] - codebook[g, k]) ** 2))
                if d < best_d:
                    best, best_d = k, d
            out[g, i] = best
    return out


def make_pvq(dim=12, groups=3, k=16, u=4, seed=0):
    pvq = ProductVQ(dim, groups, k, u, np.random.default_rng(seed))
    pvq.init_codebooks(seed)
    return pvq


def test_nearest_codes_match_exhaustive_search_with_ties():
    rng = np.random.default_rng(1)
    cb = rng.standard_normal((2, 8, 3))
    cb[:, 5] = cb[:, 2]   # duplicate rows: ties must go to index 2
    q = rng.standard_normal((2, 50, 3))
    q[:, :10] = cb[:, 2][:, None]
    got = nearest_codes(q, cb)
    np.testing.assert_array_equal(got, brute_force_codes(q, cb))
    assert np.all(got[:, :10] == 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_code_selection_is_scale_invariant(seed, alpha):
    pvq = make_pvq(seed=seed % 7)
    z = np.random.default_rng(seed).standard_normal((20, 12))
    with nx.no_grad():
        a = pvq(Tensor(z)).codes
        b = pvq(Tensor(alpha * z)).codes
    np.testing.assert_array_equal(a, b)


def test_forward_value_equals_lookup_of_emitted_codes():
    pvq = make_pvq()
    z = np.random.default_rng(2).standard_normal((30, 12))
    res = pvq(Tensor(z))
    assert res.codes.shape == (30, 3)
    assert np.array_equal(res.z_q.data, pvq.lookup(res.codes).data)


def test_vq_loss_value():
    z_e = Tensor(np.array([[1.0, 0.0]]))
    z_q = Tensor(np.array([[0.0, 1.0]]))
    assert float(vq_loss(z_e, z_q, 0.25).data[0]) == pytest.approx(2.0 + 0.25 * 2.0)
    assert float(vq_loss(z_e, z_q, 0.25, "mean").data[0]) == pytest.approx((2.0 + 0.25 * 2.0) / 2)
    with pytest.raises(ValueError):
        vq_loss(z_e, z_q, 0.25, "max")


@pytest.mark.parametrize("space", ["projected", "normalized"])
def test_loss_space_and_reduction_do_not_change_codes(space):
    z = np.random.default_rng(10).standard_normal((20, 12))
    ref = make_pvq()
    with nx.no_grad():
        want = ref(Tensor(z)).codes
        for red in ("mean", "sum"):
            pvq = ProductVQ(12, 3, 16, 4, np.random.default_rng(0), loss_space=space, loss_reduction=red)
            pvq.init_codebooks(0)
            assert np.array_equal(pvq(Tensor(z)).codes, want)


def test_reconstruction_gradient_skips_codebooks_and_reaches_projections():
    pvq = make_pvq()
    z = Tensor(np.random.default_rng(3).standard_normal((10, 12)), requires_grad=True)
    w = Tensor(np.random.default_rng(4).standard_normal((10, 12)))
    with nx.Tape() as tape:
        res = pvq(z)
        loss = nx.sum_(res.z_q * w)
    g = tape.backward(loss, [pvq.codebook, pvq.w_in, pvq.w_out, z])
    assert not g[pvq.codebook].any()
    assert g[pvq.w_out].any() and g[pvq.w_in].any() and g[z].any()


def test_codebook_gradient_touches_only_selected_rows():
    pvq = make_pvq(k=64)
    z = Tensor(np.random.default_rng(5).standard_normal((6, 12)))
    with nx.Tape() as tape:
        res = pvq(z)
        loss = nx.mean(res.loss)
    g = tape.backward(loss, [pvq.codebook])[pvq.codebook]
    for grp in range(3):
        used = set(res.codes[:, grp].tolist())
        touched = set(np.flatnonzero(np.abs(g[grp]).sum(-1)).tolist())
        assert touched == used


def test_ste_gradient_matches_surrogate_finite_differences():
    pvq = make_pvq()
    z = Tensor(np.random.default_rng(6).standard_normal((8, 12)), requires_grad=True)
    w = Tensor(np.random.default_rng(7).standard_normal((8, 12)))

    def f():
        res = pvq(z)
        return nx.sum_(res.z_q * w) + nx.sum_(res.loss)

    report = nx.gradient_check(f, [z, pvq.w_in, pvq.w_out, pvq.codebook], num_coords=80, seed=1)
    assert report.max_rel_error < 1e-5


def test_bypass_is_identity_with_zero_loss():
    pvq = make_pvq()
    pvq.active = False
    z = Tensor(np.random.default_rng(8).standard_normal((4, 12)))
    res = pvq(z)
    assert res.z_q is z and res.codes is None and not res.loss.data.any()


def test_kaiming_init_is_seeded_and_scaled():
    a, b = make_pvq(k=1024, u=8, seed=3), make_pvq(k=1024, u=8, seed=3)
    assert np.array_equal(a.codebook.data, b.codebook.data)
    assert a.codebook.data.std() == pytest.approx(np.sqrt(2 / 8), rel=0.05)


def test_lookup_rejects_out_of_range_codes():
    with pytest.raises(ValueError):
        make_pvq().lookup(np.array([[0, 16, 1]]))


def test_quantize_frame_single_vector():
    pvq = make_pvq()
    res = quantize_frame(np.random.default_rng(9).standard_normal(12), pvq)
    assert res.z_q.shape == (12,) and res.codes.shape == (3,)


def test_utilization_reference_values():
    k = 1024
    assert utilization([np.ones(k)], k) == 1.0
    collapsed = np.zeros(k)
    collapsed[17] = 500
    assert utilization([collapsed], k) == 0.0
    two = np.zeros(k)
    two[[3, 900]] = 7
    assert utilization([two], k) == 0.1


def test_utilization_averages_over_streams_and_groups():
    k = 4
    full = np.ones((2, k))
    half = np.array([[1, 1, 0, 0], [1, 1, 0, 0]])
    assert utilization([full, half], k) == pytest.approx((2 * 2 + 2 * 1) / (4 * 2))


def test_utilization_rejects_empty_histograms():
    with pytest.raises(ValueError):
        utilization([np.zeros(8)], 8)
    with pytest.raises(ValueError):
        utilization([], 8)


def test_code_histogram_counts_per_group():
    codes = np.array([[0, 1], [0, 3], [2, 3]])
    h = code_histogram(codes, 2, 4)
    np.testing.assert_array_equal(h, [[2, 0, 1, 0], [0, 1, 0, 2]])
