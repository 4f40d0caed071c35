import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_freq_channel
from covgan.pilot import (
    PilotConfig,
    PilotError,
    Signature,
    concat_signature,
    omni_combiner,
    receive,
)


class TestOmniCombiner:
    def test_four_antennas(self):
        assert np.array_equal(omni_combiner(4), [1, 0, 0, 0])

    def test_single_antenna(self):
        assert np.array_equal(omni_combiner(1), [1])

    @given(m=st.integers(1, 128))
    def test_unit_norm(self, m):
        assert np.linalg.norm(omni_combiner(m)) == 1.0

    def test_zero_antennas_rejected(self):
        with pytest.raises(PilotError):
            omni_combiner(0)


class TestReceive:
    def test_noiseless_omni_samples_first_antenna(self):
        rng = np.random.default_rng(0)
        h = random_freq_channel(m=4, k=8, n_paths=2, rng=rng)
        y = receive(h, omni_combiner(4), PilotConfig())
        assert np.array_equal(y, h[:, 0])

    def test_zero_channel_noiseless(self):
        y = receive(np.zeros((8, 4), dtype=complex), omni_combiner(4), PilotConfig())
        assert np.all(y == 0)

    def test_transpose_combining(self):
        # w^T h, not w^H h: a complex combiner is not conjugated
        h = np.ones((2, 2), dtype=complex)
        w = np.array([1j, 0.0])
        y = receive(h, w, PilotConfig())
        assert np.allclose(y, 1j)

    @given(re=st.floats(-3, 3), im=st.floats(-3, 3))
    @settings(max_examples=25, deadline=None)
    def test_linear_in_channel(self, re, im):
        alpha = re + 1j * im
        rng = np.random.default_rng(1)
        h = random_freq_channel(m=4, k=8, n_paths=2, rng=rng)
        w = omni_combiner(4)
        assert np.allclose(receive(alpha * h, w, PilotConfig()), alpha * receive(h, w, PilotConfig()))

    def test_noise_variance_matches_snr(self):
        # 20 dB SNR on a unit flat channel -> noise variance 0.01
        k = 200_000
        h = np.ones((k, 2), dtype=complex)
        cfg = PilotConfig(snr_db=20.0, seed=123)
        y = receive(h, omni_combiner(2), cfg, np.random.default_rng(123))
        noise = y - 1.0
        assert np.var(noise) == pytest.approx(0.01, rel=0.05)
        assert abs(np.mean(noise)) < 1e-3

    def test_noise_reproducible_for_fixed_seed(self):
        h = np.ones((16, 2), dtype=complex)
        cfg = PilotConfig(snr_db=10.0)
        a = receive(h, omni_combiner(2), cfg, np.random.default_rng(9))
        b = receive(h, omni_combiner(2), cfg, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_zero_channel_with_finite_snr_rejected(self):
        with pytest.raises(PilotError, match="SNR"):
            receive(np.zeros((4, 2), dtype=complex), omni_combiner(2), PilotConfig(snr_db=10.0))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(PilotError):
            receive(np.zeros((4, 3), dtype=complex), omni_combiner(2), PilotConfig())

    def test_non_unit_symbols_rejected(self):
        cfg = PilotConfig(symbols=np.array([1.0, 2.0], dtype=complex))
        with pytest.raises(PilotError, match="unit modulus"):
            receive(np.ones((2, 2), dtype=complex), omni_combiner(2), cfg)

    def test_custom_phase_symbols_applied(self):
        s = np.exp(1j * np.array([0.1, 0.2, 0.3]))
        cfg = PilotConfig(symbols=s)
        h = np.ones((3, 1), dtype=complex)
        assert np.allclose(receive(h, omni_combiner(1), cfg), s)


class TestSignature:
    def test_paper_dimensions(self):
        per_bs = [np.arange(64, dtype=complex) + n for n in range(4)]
        sig = concat_signature(per_bs)
        assert sig.y_complex.shape == (256,)
        assert sig.y_real.shape == (512,)

    def test_bs_major_subcarrier_minor_order(self):
        per_bs = [np.array([1 + 1j, 2 + 2j]), np.array([3 + 3j, 4 + 4j])]
        sig = concat_signature(per_bs)
        assert np.array_equal(sig.y_complex, [1 + 1j, 2 + 2j, 3 + 3j, 4 + 4j])
        assert np.array_equal(sig.y_real, [1, 2, 3, 4, 1, 2, 3, 4])

    def test_single_bs_identity(self):
        y = np.array([1j, 2.0, -3.0])
        sig = concat_signature([y])
        assert np.array_equal(sig.y_complex, y)

    def test_real_complex_round_trip(self):
        rng = np.random.default_rng(0)
        per_bs = [rng.normal(size=8) + 1j * rng.normal(size=8) for _ in range(3)]
        sig = concat_signature(per_bs)
        back = Signature.from_real(sig.y_real, n_bs=3, k_sub=8)
        assert np.array_equal(back.y_complex, sig.y_complex)

    def test_ragged_input_rejected(self):
        with pytest.raises(PilotError):
            concat_signature([np.zeros(4, dtype=complex), np.zeros(5, dtype=complex)])

    def test_empty_input_rejected(self):
        with pytest.raises(PilotError):
            concat_signature([])
