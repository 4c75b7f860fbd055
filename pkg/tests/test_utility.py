import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckv import SyntheticSpec, gen_synthetic
from ckv.errors import DegenerateHeadError
from ckv.trace import DIFFUSE, MIXED
from ckv.utility import (base_utility, compute_utility, mean_attention,
                         relative_norms, window_mass)


def make_trace(seed=0, **kw):
    base = dict(L=2, H=2, T=12, w_obs=4, regime=MIXED, seed=seed)
    base.update(kw)
    return gen_synthetic(SyntheticSpec(**base))


class TestMeanAttention:
    def test_single_head_identity(self):
        t = make_trace(L=1, H=1)
        assert np.allclose(mean_attention(t), t.attention[0, 0].astype(np.float64))

    def test_two_head_mean(self):
        t = make_trace(L=1, H=2, T=2, w_obs=1)
        t.attention[0, 0, 0] = [0.8, 0.2]
        t.attention[0, 1, 0] = [0.4, 0.6]
        assert np.allclose(mean_attention(t)[0], [0.6, 0.4])

    def test_identical_heads(self):
        t = make_trace()
        t.attention[:] = t.attention[0, 0]
        assert np.allclose(mean_attention(t), t.attention[0, 0].astype(np.float64),
                           atol=1e-7)

    def test_rows_remain_distributions(self):
        rows = mean_attention(make_trace(seed=8))
        assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-5)


class TestWindowMass:
    def test_single_row_window(self):
        t = make_trace(w_obs=1)
        assert np.allclose(window_mass(mean_attention(t)), mean_attention(t)[0])

    def test_uniform_causal_closed_form(self):
        # Uniform causal attention, T=4, w_obs=2: queries 3 and 4.
        rows = np.array([[1 / 3, 1 / 3, 1 / 3, 0.0],
                         [0.25, 0.25, 0.25, 0.25]])
        alpha = window_mass(rows)
        assert np.allclose(alpha, [1 / 3 + 0.25, 1 / 3 + 0.25, 1 / 3 + 0.25, 0.25])

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_mass_conservation(self, seed):
        t = make_trace(seed=seed)
        assert window_mass(mean_attention(t)).sum() == pytest.approx(
            t.window_size, abs=1e-4)


class TestRelativeNorms:
    def test_constant_norms_give_ones(self):
        t = make_trace()
        t.value_norms[:] = 3.5
        assert np.allclose(relative_norms(t), 1.0)

    def test_two_point_example(self):
        t = make_trace(L=1, H=1, T=2, w_obs=1)
        t.value_norms[0, 0] = [1.0, 3.0]
        assert np.allclose(relative_norms(t)[0, 0], [0.5, 1.5])

    def test_mean_is_one(self):
        rho = relative_norms(make_trace(seed=3))
        assert np.allclose(rho.mean(axis=2), 1.0, atol=1e-5)

    def test_scale_invariance(self):
        t = make_trace(seed=4)
        rho = relative_norms(t)
        t.value_norms[1, 0] *= 7.3
        assert np.allclose(relative_norms(t), rho, atol=1e-6)

    def test_dead_head_fallback_and_strict(self):
        t = make_trace()
        t.value_norms[0, 1] = 0.0
        with pytest.warns(UserWarning):
            rho = relative_norms(t)
        assert np.allclose(rho[0, 1], 1.0)
        with pytest.raises(DegenerateHeadError):
            relative_norms(t, strict=True)


class TestBaseUtility:
    def test_unit_rho_gives_alpha(self):
        t = make_trace()
        t.value_norms[:] = 1.0
        field = compute_utility(t)
        for l in range(2):
            for h in range(2):
                assert np.allclose(field.u[l, h], field.alpha)

    def test_two_entry_product(self):
        u = base_utility(np.array([0.2, 0.8]), np.array([[[1.5, 0.5]]]))
        assert np.allclose(u[0, 0], [0.3, 0.4])

    def test_matches_brute_force(self):
        t = make_trace(seed=6, regime=DIFFUSE)
        field = compute_utility(t)
        L, H, T, w = 2, 2, t.seq_len, t.window_size
        att = t.attention.astype(np.float64)
        for l in range(L):
            for h in range(H):
                for tok in range(T):
                    alpha = sum(att[ll, hh, r, tok] for ll in range(L)
                                for hh in range(H) for r in range(w)) / (L * H)
                    norms = t.value_norms[l, h].astype(np.float64)
                    rho = norms[tok] / norms.mean()
                    assert field.u[l, h, tok] == pytest.approx(alpha * rho, abs=1e-6)

    def test_invariants_product_structure(self):
        t = make_trace(seed=9)
        field = compute_utility(t)
        assert np.allclose(field.u, field.alpha[None, None, :] * field.rho)
