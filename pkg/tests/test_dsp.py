"""Filter design against the closed-form Butterworth response, plus chain behavior."""

import logging
import math

import numpy as np
import pytest

from fedfuse.dsp import (
    Biquad,
    BiquadCascade,
    Channel,
    DegenerateCutoff,
    DspConfig,
    InvalidOrder,
    Signal,
    TooShort,
    design_butterworth,
    filter_signal,
    frequency_response,
    moving_average,
    preprocess_channel,
    zscore,
)


def analytic_lowpass_mag(order, cutoff_hz, sample_rate_hz, freq_hz):
    """Closed-form magnitude of a bilinear-transform Butterworth low-pass.

    The bilinear transform maps digital frequency f onto the analog axis at
    2 fs tan(pi f / fs); with the cutoff pre-warped the same way, the analog
    prototype magnitude 1 / sqrt(1 + (w / wc)^(2n)) gives the exact digital
    response.
    """
    w = math.tan(math.pi * freq_hz / sample_rate_hz)
    wc = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    return 1.0 / math.sqrt(1.0 + (w / wc) ** (2 * order))


class TestDesign:
    @pytest.mark.parametrize(
        "order,cutoff,rate",
        [(4, 0.5, 4.0), (2, 0.5, 4.0), (6, 1.0, 8.0), (8, 0.3, 2.0), (4, 1.9, 4.0)],
    )
    def test_magnitude_matches_analytic(self, order, cutoff, rate):
        cascade = design_butterworth(order, cutoff, rate)
        freqs = np.linspace(0.02, rate / 2 * 0.98, 16)
        for f in freqs:
            got = abs(frequency_response(cascade, f, rate))
            want = analytic_lowpass_mag(order, cutoff, rate, f)
            assert got == pytest.approx(want, abs=1e-6)

    def test_half_power_at_cutoff(self):
        cascade = design_butterworth(4, 0.5, 4.0)
        mag = abs(frequency_response(cascade, 0.5, 4.0))
        db = 20.0 * math.log10(mag)
        assert db == pytest.approx(-3.0103, abs=0.01)

    def test_unit_dc_gain(self):
        cascade = design_butterworth(4, 0.5, 4.0)
        assert cascade.dc_gain == pytest.approx(1.0, abs=1e-12)
        assert abs(frequency_response(cascade, 0.0, 4.0)) == pytest.approx(1.0, abs=1e-12)

    def test_monotone_rolloff(self):
        cascade = design_butterworth(4, 0.5, 4.0)
        freqs = np.linspace(0.01, 1.99, 200)
        mags = [abs(frequency_response(cascade, f, 4.0)) for f in freqs]
        assert all(a >= b for a, b in zip(mags, mags[1:]))

    def test_stage_count_and_stability(self):
        for order in (2, 4, 6, 8):
            cascade = design_butterworth(order, 0.45 * 4.0, 4.0)  # near Nyquist
            assert len(cascade.stages) == order // 2
            assert all(s.is_stable() for s in cascade.stages)

    def test_odd_or_nonpositive_order_rejected(self):
        for order in (3, 1, 0, -2):
            with pytest.raises(InvalidOrder):
                design_butterworth(order, 0.5, 4.0)

    def test_degenerate_cutoff_rejected(self):
        with pytest.raises(DegenerateCutoff):
            design_butterworth(4, 2.0, 4.0)  # exactly Nyquist
        with pytest.raises(DegenerateCutoff):
            design_butterworth(4, 3.0, 4.0)
        with pytest.raises(DegenerateCutoff):
            design_butterworth(4, 0.0, 4.0)

    def test_unstable_stage_rejected_by_cascade(self):
        with pytest.raises(ValueError):
            BiquadCascade((Biquad(1.0, 0.0, 0.0, 0.0, 1.5),))


class TestFilterSignal:
    def test_matches_direct_form_one_reference(self, rng):
        cascade = design_butterworth(4, 0.5, 4.0)
        x = rng.standard_normal(257)
        got = filter_signal(cascade, Signal(x, 4.0)).samples

        y = x.astype(np.float64).copy()
        for s in cascade.stages:
            out = np.empty_like(y)
            for n in range(y.size):
                acc = s.b0 * y[n]
                if n >= 1:
                    acc += s.b1 * y[n - 1] - s.a1 * out[n - 1]
                if n >= 2:
                    acc += s.b2 * y[n - 2] - s.a2 * out[n - 2]
                out[n] = acc
            y = out
        np.testing.assert_allclose(got, y, rtol=0, atol=1e-10)

    def test_stopband_sine_squashed(self):
        rate = 4.0
        t = np.arange(1024) / rate
        hi = Signal(np.sin(2.0 * np.pi * 1.8 * t), rate)
        out = filter_signal(design_butterworth(4, 0.5, rate), hi).samples
        # steady state only, the transient dies off well before midway
        assert np.abs(out[512:]).max() < 5e-3

    def test_passband_sine_preserved(self):
        rate = 4.0
        t = np.arange(1024) / rate
        lo = Signal(np.sin(2.0 * np.pi * 0.1 * t), rate)
        out = filter_signal(design_butterworth(4, 0.5, rate), lo).samples
        want_rms = 1.0 / math.sqrt(2.0)
        got_rms = np.sqrt(np.mean(out[512:] ** 2))
        assert got_rms == pytest.approx(want_rms, rel=0.02)

    def test_metadata_preserved(self):
        sig = Signal(np.ones(8), 4.0, Channel.EDA)
        out = filter_signal(design_butterworth(2, 0.5, 4.0), sig)
        assert len(out) == 8
        assert out.sample_rate_hz == 4.0
        assert out.channel is Channel.EDA

    def test_empty_signal_rejected(self):
        with pytest.raises(TooShort):
            filter_signal(design_butterworth(2, 0.5, 4.0), Signal(np.empty(0), 4.0))


class TestSmoothingAndNormalization:
    def test_moving_average_brute_force(self, rng):
        x = rng.standard_normal(64)
        out = moving_average(Signal(x, 4.0), window=5).samples
        for t in range(x.size):
            lo = max(0, t - 4)
            assert out[t] == pytest.approx(x[lo : t + 1].mean(), abs=1e-12)

    def test_window_one_is_identity(self, rng):
        # identity up to cumsum rounding, since sums are differenced back out
        x = rng.standard_normal(16)
        out = moving_average(Signal(x, 4.0), window=1).samples
        np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            moving_average(Signal(np.ones(4), 4.0), window=0)

    def test_zscore_moments(self, rng):
        x = rng.standard_normal(100) * 3.0 + 7.0
        out = zscore(Signal(x, 4.0)).samples
        assert out.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.std() == pytest.approx(1.0, abs=1e-12)

    def test_zscore_constant_maps_to_zeros(self):
        out = zscore(Signal(np.full(10, 3.7), 4.0)).samples
        np.testing.assert_array_equal(out, np.zeros(10))

    def test_zscore_too_short(self):
        with pytest.raises(TooShort):
            zscore(Signal(np.ones(1), 4.0))


class TestPreprocessChain:
    def test_output_is_normalized(self, rng):
        sig = Signal(rng.standard_normal(128) + 5.0, 4.0)
        out = preprocess_channel(sig)
        assert out.samples.mean() == pytest.approx(0.0, abs=1e-12)
        assert out.samples.std() == pytest.approx(1.0, abs=1e-12)

    def test_bypass_below_nyquist_margin(self, rng, caplog):
        # 0.8 Hz rate puts Nyquist at 0.4, under the default 0.5 Hz cutoff
        sig = Signal(rng.standard_normal(32), 0.8)
        cfg = DspConfig()
        assert cfg.filter_bypassed(0.8)
        with caplog.at_level(logging.WARNING, logger="fedfuse.dsp"):
            out = preprocess_channel(sig, cfg)
        assert any("bypass" in rec.message for rec in caplog.records)
        # smoothing and z-score still applied
        want = zscore(moving_average(sig, cfg.smoothing_window)).samples
        np.testing.assert_array_equal(out.samples, want)

    def test_no_bypass_at_default_rate(self):
        assert not DspConfig().filter_bypassed(4.0)


class TestSignalValidation:
    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Signal(np.array([1.0, np.nan]), 4.0)

    def test_two_dimensional_rejected(self):
        with pytest.raises(ValueError):
            Signal(np.ones((2, 2)), 4.0)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            Signal(np.ones(4), 0.0)
