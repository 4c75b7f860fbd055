import numpy as np
import pytest

from ckv import SyntheticSpec, gen_synthetic, load_trace, save_trace, validate_trace
from ckv.errors import FormatError, ParameterError, TruncationError, ValidationError
from ckv.riskgate import structural_risk
from ckv.trace import CONCENTRATED, DIFFUSE, FULL, MIXED, WINDOW_ROWS
from ckv.utility import mean_attention


def spec(**kw):
    base = dict(L=2, H=2, T=16, w_obs=4, regime=MIXED, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


class TestGenSynthetic:
    def test_generated_trace_is_valid(self):
        assert validate_trace(gen_synthetic(spec())).ok

    def test_window_rows_shape(self):
        t = gen_synthetic(spec(T=8, w_obs=4))
        assert t.attention.shape == (2, 2, 4, 8)

    def test_full_mode_shape(self):
        t = gen_synthetic(spec(T=8, w_obs=4, attention_mode=FULL))
        assert t.attention.shape == (2, 2, 8, 8)
        assert validate_trace(t).ok

    def test_diffuse_entropy_near_uniform(self):
        t = gen_synthetic(spec(regime=DIFFUSE, T=16, w_obs=1))
        # The last row is near-uniform over 16 positions.
        assert structural_risk(mean_attention(t)) == pytest.approx(np.log(16), abs=0.1)

    def test_concentrated_one_hot_entropy_zero(self):
        t = gen_synthetic(spec(regime=CONCENTRATED, peak=1.0))
        assert structural_risk(mean_attention(t)) == pytest.approx(0.0, abs=1e-12)

    def test_concentrated_below_diffuse(self):
        c = gen_synthetic(spec(regime=CONCENTRATED))
        d = gen_synthetic(spec(regime=DIFFUSE))
        assert structural_risk(mean_attention(c)) < structural_risk(mean_attention(d))

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.ckvt", tmp_path / "b.ckvt"
        save_trace(gen_synthetic(spec(seed=42)), a)
        save_trace(gen_synthetic(spec(seed=42)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_w_obs_too_large(self):
        with pytest.raises(ParameterError):
            gen_synthetic(spec(T=4, w_obs=5))


class TestSerialization:
    def test_round_trip_identity(self, tmp_path):
        t = gen_synthetic(spec())
        p = tmp_path / "t.ckvt"
        save_trace(t, p)
        t2 = load_trace(p)
        assert np.array_equal(t.attention, t2.attention)
        assert np.array_equal(t.value_norms, t2.value_norms)
        assert np.array_equal(t.tokens, t2.tokens)
        assert np.array_equal(t.logprobs, t2.logprobs)
        assert (t.num_layers, t.num_heads, t.seq_len, t.window_size,
                t.attention_mode) == (t2.num_layers, t2.num_heads, t2.seq_len,
                                      t2.window_size, t2.attention_mode)

    def test_kv_round_trip(self, tiny_weights, tmp_path):
        from ckv import prefill
        tokens = np.arange(6) % tiny_weights.config.vocab_size
        t = prefill(tiny_weights, tokens, include_kv=True)
        p = tmp_path / "kv.ckvt"
        save_trace(t, p)
        t2 = load_trace(p)
        assert np.array_equal(t.keys, t2.keys)
        assert np.array_equal(t.values, t2.values)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckvt"
        p.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            load_trace(p)

    def test_truncated_section(self, tmp_path):
        t = gen_synthetic(spec())
        p = tmp_path / "t.ckvt"
        save_trace(t, p)
        data = p.read_bytes()
        p.write_bytes(data[:len(data) // 2])
        with pytest.raises(TruncationError):
            load_trace(p)

    def test_meta_sidecar(self, tmp_path):
        p = tmp_path / "t.ckvt"
        save_trace(gen_synthetic(spec()), p, meta={"model": "toy"})
        assert (tmp_path / "t.ckvt.meta.json").exists()


class TestValidation:
    def test_bad_row_sum_detected(self, tmp_path):
        t = gen_synthetic(spec())
        t.attention[1, 0, 2] *= 0.8
        report = validate_trace(t)
        assert not report.ok
        assert any("attention[1][0]" in e and "row 2" in e for e in report.entries)
        p = tmp_path / "bad.ckvt"
        save_trace(t, p)
        with pytest.raises(ValidationError):
            load_trace(p)

    def test_negative_norm_located(self):
        t = gen_synthetic(spec())
        t.value_norms[0, 1, 3] = -0.5
        report = validate_trace(t)
        assert any("value_norms[0][1][3]" in e for e in report.entries)

    def test_non_causal_entry_located(self):
        t = gen_synthetic(spec(T=8, w_obs=8))
        # Query position 3 (row 2) must not see key 6.
        t.attention[0, 0, 2, 5] = 0.1
        report = validate_trace(t)
        assert any("non-causal" in e for e in report.entries)

    def test_positive_logprob_flagged(self):
        t = gen_synthetic(spec())
        t.logprobs[4] = 0.3
        assert any("logprobs[4]" in e for e in validate_trace(t).entries)
