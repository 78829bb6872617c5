"""1-D physiological signal conditioning: low-pass filtering, smoothing, normalization."""

import cmath
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)


class Channel(Enum):
    HEART_RATE = "hr"
    EDA = "eda"
    SKIN_TEMP = "temp"


class InvalidOrder(ValueError):
    """Filter order must be a positive even integer."""


class DegenerateCutoff(ValueError):
    """Cutoff frequency at or above Nyquist admits no stable low-pass design."""


class TooShort(ValueError):
    """Signal has too few samples for the requested operation."""


@dataclass
class Signal:
    """A finite, uniformly sampled 1-D signal.

    Attributes:
        samples: sample values, all finite
        sample_rate_hz: sampling rate, > 0
        channel: which physiological channel this is
    """

    samples: np.ndarray
    sample_rate_hz: float
    channel: Channel = Channel.HEART_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {self.samples.shape}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("signal contains non-finite samples")
        if not (self.sample_rate_hz > 0):
            raise ValueError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")

    def __len__(self):
        return self.samples.size

    def with_samples(self, samples: np.ndarray) -> "Signal":
        return Signal(samples, self.sample_rate_hz, self.channel)


@dataclass(frozen=True)
class Biquad:
    """One second-order section, coefficients normalized so a0 = 1."""

    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def is_stable(self) -> bool:
        # Stability triangle for the denominator z^2 + a1 z + a2
        return abs(self.a2) < 1.0 and abs(self.a1) < 1.0 + self.a2


@dataclass(frozen=True)
class BiquadCascade:
    """An ordered chain of second-order sections applied in sequence."""

    stages: tuple[Biquad, ...]
    dc_gain: float = 1.0

    def __post_init__(self):
        for i, s in enumerate(self.stages):
            if not s.is_stable():
                raise ValueError(f"stage {i} is unstable: {s}")


def design_butterworth(order: int, cutoff_hz: float, sample_rate_hz: float) -> BiquadCascade:
    """Design a low-pass Butterworth filter as cascaded biquads.

    The analog prototype poles are pre-warped to the target cutoff and mapped
    to the z-plane with the bilinear transform, so the half-power point lands
    exactly at ``cutoff_hz``. Each conjugate pole pair becomes one section
    with unity DC gain.

    Args:
        order: filter order, positive and even
        cutoff_hz: -3 dB frequency in Hz, 0 < cutoff_hz < sample_rate_hz / 2
        sample_rate_hz: sampling rate in Hz

    Returns:
        BiquadCascade of order / 2 stages.

    Raises:
        InvalidOrder: order is zero, negative, or odd
        DegenerateCutoff: cutoff_hz is not strictly below Nyquist
    """
    if order <= 0 or order % 2 != 0:
        raise InvalidOrder(f"order must be a positive even integer, got {order}")
    if cutoff_hz <= 0:
        raise DegenerateCutoff(f"cutoff_hz must be > 0, got {cutoff_hz}")
    if cutoff_hz >= sample_rate_hz / 2:
        raise DegenerateCutoff(
            f"cutoff {cutoff_hz} Hz >= Nyquist {sample_rate_hz / 2} Hz; no stable design exists"
        )

    # Pre-warp so the bilinear transform maps the analog cutoff onto cutoff_hz.
    k = 2.0 * sample_rate_hz
    warped = k * math.tan(math.pi * cutoff_hz / sample_rate_hz)

    stages = []
    for i in range(order // 2):
        # Butterworth pole angle for the i-th conjugate pair (upper half plane).
        theta = math.pi * (2 * i + order + 1) / (2 * order)
        pole = warped * cmath.exp(1j * theta)
        # Analog section: warped^2 / (s^2 + a1s*s + a0s), real coefficients.
        a1s = -2.0 * pole.real
        a0s = abs(pole) ** 2
        # Bilinear transform with s = k (1 - z^-1) / (1 + z^-1).
        d0 = k * k + a1s * k + a0s
        b0 = a0s / d0
        b1 = 2.0 * a0s / d0
        b2 = a0s / d0
        a1 = 2.0 * (a0s - k * k) / d0
        a2 = (k * k - a1s * k + a0s) / d0
        stages.append(Biquad(b0, b1, b2, a1, a2))

    gain = 1.0
    for s in stages:
        gain *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2)
    return BiquadCascade(tuple(stages), dc_gain=gain)


def frequency_response(cascade: BiquadCascade, freq_hz: float, sample_rate_hz: float) -> complex:
    """Evaluate the cascade transfer function at one frequency."""
    z_inv = cmath.exp(-2j * math.pi * freq_hz / sample_rate_hz)
    h = 1.0 + 0.0j
    for s in cascade.stages:
        h *= (s.b0 + s.b1 * z_inv + s.b2 * z_inv * z_inv) / (
            1.0 + s.a1 * z_inv + s.a2 * z_inv * z_inv
        )
    return h


def filter_signal(cascade: BiquadCascade, signal: Signal) -> Signal:
    """Run the cascade causally over a signal with zero initial state.

    Direct-form-II-transposed evaluation, stage by stage. Output length equals
    input length; sample rate and channel are preserved.
    """
    if len(signal) == 0:
        raise TooShort("cannot filter an empty signal")
    y = signal.samples.tolist()
    for s in cascade.stages:
        b0, b1, b2, a1, a2 = s.b0, s.b1, s.b2, s.a1, s.a2
        s1 = 0.0
        s2 = 0.0
        for n, xn in enumerate(y):
            yn = b0 * xn + s1
            s1 = b1 * xn - a1 * yn + s2
            s2 = b2 * xn - a2 * yn
            y[n] = yn
    return signal.with_samples(np.asarray(y))


def moving_average(signal: Signal, window: int = 5) -> Signal:
    """Causal moving average, truncated at the left boundary.

    out[t] is the mean of samples max(0, t - window + 1) .. t, so early
    outputs average fewer than ``window`` points and length is preserved.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = signal.samples
    csum = np.concatenate(([0.0], np.cumsum(x)))
    t = np.arange(x.size)
    lo = np.maximum(0, t - window + 1)
    out = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
    return signal.with_samples(out)


def zscore(signal: Signal) -> Signal:
    """Normalize to zero mean and unit population standard deviation.

    A signal whose population sigma is below 1e-12 maps to all zeros.
    """
    if len(signal) < 2:
        raise TooShort(f"zscore needs >= 2 samples, got {len(signal)}")
    x = signal.samples
    mu = x.mean()
    sigma = x.std()  # population (divisor N)
    if sigma < 1e-12:
        return signal.with_samples(np.zeros_like(x))
    return signal.with_samples((x - mu) / sigma)


@dataclass
class DspConfig:
    """Parameters of the channel preprocessing chain."""

    filter_order: int = 4
    cutoff_hz: float = 0.5
    smoothing_window: int = 5

    def filter_bypassed(self, sample_rate_hz: float) -> bool:
        """True when the cutoff is degenerate at this rate and filtering is skipped."""
        return self.cutoff_hz >= sample_rate_hz / 2


def preprocess_channel(signal: Signal, cfg: DspConfig = DspConfig()) -> Signal:
    """Condition one channel: low-pass filter, then smooth, then z-score.

    When the configured cutoff is at or above Nyquist for this signal's rate
    the filter stage is bypassed (identity) and a warning is logged; smoothing
    and normalization still apply.
    """
    if len(signal) == 0:
        raise TooShort("cannot preprocess an empty signal")
    if cfg.filter_bypassed(signal.sample_rate_hz):
        log.warning(
            "low-pass bypassed: cutoff %.3g Hz >= Nyquist %.3g Hz at rate %.3g Hz",
            cfg.cutoff_hz,
            signal.sample_rate_hz / 2,
            signal.sample_rate_hz,
        )
        filtered = signal
    else:
        cascade = design_butterworth(cfg.filter_order, cfg.cutoff_hz, signal.sample_rate_hz)
        filtered = filter_signal(cascade, signal)
    smoothed = moving_average(filtered, cfg.smoothing_window)
    return zscore(smoothed)
