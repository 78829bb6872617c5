"""Synthetic data: physiological windows and template-based face stand-ins.

The physiological generator drives each channel with class-dependent
waveform parameters, runs the standard preprocessing (low-pass filter,
moving average), and normalizes with statistics pooled over the whole
generated session so that between-class amplitude differences survive.
All randomness flows through the noise term: with sigma = 0, every window
of a class is identical.

The visual generator renders one sinusoidal grating template per class
plus pixel noise. A configurable "twin" pair of near-identical templates
creates classes only the other modality can tell apart, which is what
makes decision-level fusion measurably better than either modality alone.
"""

from dataclasses import dataclass, replace

import numpy as np

from .. import dsp
from ..features import (
    IMAGE_SIZE,
    N_CLASSES,
    EmotionLabel,
    PhysioWindow,
    extract_physio_features,
)

HR_BASE_BPM = 60.0
HR_WAVE_HZ = 0.35
TEMP_BASE_C = 33.0
EDA_BUMP_WIDTH_S = 0.4


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer parts, for independent substreams."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class SynthPhysioConfig:
    """Per-class waveform parameters for the three channels.

    ``hr_step_scale`` sets the heart-rate oscillation amplitude (drives
    HRV), ``eda_peak_amp``/``eda_peak_rate`` set height and count of the
    EDA bumps in a window, and ``temp_drift_amp`` sets the temperature ramp
    (drives the peak-to-peak range).
    """

    hr_step_scale: tuple[float, ...] = (0.4, 0.9, 1.4, 1.9, 2.4, 2.9, 3.4)
    eda_peak_amp: tuple[float, ...] = (0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.1)
    eda_peak_rate: tuple[int, ...] = (1, 1, 2, 2, 3, 3, 4)
    temp_drift_amp: tuple[float, ...] = (0.1, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0)
    noise_sigma: float = 0.05
    windows_per_class: int = 30
    sample_rate_hz: float = 4.0
    window_s: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("hr_step_scale", "eda_peak_amp", "eda_peak_rate", "temp_drift_amp"):
            if len(getattr(self, name)) != N_CLASSES:
                raise ValueError(f"{name} needs {N_CLASSES} entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.windows_per_class < 1:
            raise ValueError("windows_per_class must be >= 1")
        if self.sample_rate_hz <= 0 or self.window_s <= 0:
            raise ValueError("sample_rate_hz and window_s must be positive")

    @property
    def samples_per_window(self) -> int:
        return int(round(self.window_s * self.sample_rate_hz))


def gen_synthetic_physio(cfg: SynthPhysioConfig) -> list[PhysioWindow]:
    """Balanced, class-ordered preprocessed windows (label attached)."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.samples_per_window
    t = np.arange(n) / cfg.sample_rate_hz

    dsp_cfg = dsp.DspConfig()
    cascade = None
    if not dsp_cfg.filter_bypassed(cfg.sample_rate_hz):
        cascade = dsp.design_butterworth(dsp_cfg.filter_order, dsp_cfg.cutoff_hz, cfg.sample_rate_hz)

    raw = {"hr": [], "eda": [], "temp": []}
    labels = []
    for k in range(N_CLASSES):
        bumps = np.zeros(n)
        centers = (np.arange(cfg.eda_peak_rate[k]) + 1.0) * cfg.window_s / (cfg.eda_peak_rate[k] + 1)
        for c in centers:
            bumps += np.exp(-((t - c) ** 2) / (2.0 * EDA_BUMP_WIDTH_S**2))
        for _ in range(cfg.windows_per_class):
            hr = (
                HR_BASE_BPM
                + cfg.hr_step_scale[k] * np.sin(2.0 * np.pi * HR_WAVE_HZ * t)
                + cfg.noise_sigma * rng.standard_normal(n)
            )
            eda = cfg.eda_peak_amp[k] * bumps + cfg.noise_sigma * rng.standard_normal(n)
            temp = (
                TEMP_BASE_C
                + cfg.temp_drift_amp[k] * (t / cfg.window_s)
                + cfg.noise_sigma * rng.standard_normal(n)
            )
            raw["hr"].append(hr)
            raw["eda"].append(eda)
            raw["temp"].append(temp)
            labels.append(k)

    processed = {}
    for name, windows in raw.items():
        smoothed = []
        for w in windows:
            sig = dsp.Signal(w, cfg.sample_rate_hz)
            if cascade is not None:
                sig = dsp.filter_signal(cascade, sig)
            smoothed.append(dsp.moving_average(sig).samples)
        stacked = np.stack(smoothed)
        # session-level normalization: per-window z-scores would erase the
        # between-class amplitude differences the features rely on
        mean = stacked.mean()
        std = stacked.std()
        processed[name] = (stacked - mean) / std if std >= 1e-12 else np.zeros_like(stacked)

    return [
        PhysioWindow(
            hr=processed["hr"][i],
            eda=processed["eda"][i],
            temp=processed["temp"][i],
            sample_rate_hz=cfg.sample_rate_hz,
            label=EmotionLabel(labels[i]),
        )
        for i in range(len(labels))
    ]


def physio_feature_matrix(windows: list[PhysioWindow]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3) feature rows plus the (N,) label vector."""
    feats = np.stack([extract_physio_features(w).as_array() for w in windows])
    labels = np.array([int(w.label) for w in windows], dtype=np.int64)
    return feats, labels


@dataclass(frozen=True)
class SynthVisualConfig:
    """Grating templates, one per class, with additive pixel noise.

    ``twin_pair`` names two classes whose templates are blended to within
    ``twin_delta`` of each other, making them near-indistinguishable from
    pixels alone.
    """

    images_per_class: int = 30
    noise_sigma: float = 0.12
    contrast: float = 0.8
    twin_pair: tuple[int, int] | None = None
    twin_delta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be >= 1")
        if self.noise_sigma < 0 or not 0 < self.contrast <= 1:
            raise ValueError("noise_sigma >= 0 and contrast in (0, 1] required")
        if self.twin_pair is not None:
            a, b = self.twin_pair
            if not (0 <= a < N_CLASSES and 0 <= b < N_CLASSES and a != b):
                raise ValueError(f"bad twin pair {self.twin_pair}")
        if not 0 <= self.twin_delta <= 1:
            raise ValueError("twin_delta must lie in [0, 1]")


_TEMPLATE_FREQS = ((2, 0), (0, 2), (3, 3), (4, 1), (1, 4), (5, 2), (2, 5))


def class_templates(cfg: SynthVisualConfig) -> np.ndarray:
    """(7, 48, 48) noise-free class images in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")
    base = np.stack(
        [
            np.sin(2.0 * np.pi * (fx * xx + fy * yy) / IMAGE_SIZE)
            for fx, fy in _TEMPLATE_FREQS
        ]
    )
    if cfg.twin_pair is not None:
        a, b = cfg.twin_pair
        base[b] = (1.0 - cfg.twin_delta) * base[a] + cfg.twin_delta * base[b]
    return 0.5 + 0.5 * cfg.contrast * base


def gen_synthetic_visual(cfg: SynthVisualConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class-ordered noisy images: ((N, 48, 48) in [0, 1], (N,) labels)."""
    rng = np.random.default_rng(cfg.seed)
    templates = class_templates(cfg)
    images = []
    labels = []
    for k in range(N_CLASSES):
        noise = cfg.noise_sigma * rng.standard_normal(
            (cfg.images_per_class, IMAGE_SIZE, IMAGE_SIZE)
        )
        images.append(np.clip(templates[k] + noise, 0.0, 1.0))
        labels.extend([k] * cfg.images_per_class)
    return np.concatenate(images), np.asarray(labels, dtype=np.int64)


@dataclass
class ClientData:
    """One party's paired multimodal samples."""

    x: np.ndarray
    features: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        # float32 images up front: the network trains in float32 anyway and
        # this keeps in-process data bitwise equal to a save/load round trip
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = self.x.shape[0]
        if self.features.shape != (n, 3) or self.y.shape != (n,):
            raise ValueError(
                f"inconsistent shapes: x {self.x.shape}, features {self.features.shape}, "
                f"y {self.y.shape}"
            )

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class MultimodalTaskConfig:
    """The default desk-scale fusion task.

    Physio parameters coincide exactly for classes 0, 1 and 2; visual
    templates coincide exactly for classes 5 and 6. Each modality is blind
    where the other is sighted, so fusion has structural headroom over
    either model alone. The blind regions are shaped for the confidence
    tie-break: on the visual twins the forest votes unanimously and
    overrides the network, while on the three-way physio block the votes
    split and the network's word wins. A nonzero gap inside a blind group
    defeats the point: the models learn it.
    """

    n_clients: int = 3
    train_per_class: int = 24
    test_per_class: int = 30
    physio: SynthPhysioConfig = SynthPhysioConfig(
        hr_step_scale=(1.0, 1.0, 1.0, 2.3, 2.9, 3.5, 4.1),
        eda_peak_amp=(0.6, 0.6, 0.6, 1.5, 1.9, 2.3, 2.7),
        eda_peak_rate=(2, 2, 2, 3, 3, 4, 4),
        temp_drift_amp=(0.3, 0.3, 0.3, 0.75, 0.95, 1.15, 1.35),
        noise_sigma=0.12,
    )
    visual: SynthVisualConfig = SynthVisualConfig(twin_pair=(5, 6), twin_delta=0.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("n_clients and per-class counts must be >= 1")


TEST_PARTY = 9999
_VIS_STREAM = 11
_PHYS_STREAM = 12


def _make_party(task: MultimodalTaskConfig, party: int, per_class: int) -> ClientData:
    vis = replace(
        task.visual,
        images_per_class=per_class,
        seed=derive_seed(task.seed, party, _VIS_STREAM),
    )
    phys = replace(
        task.physio,
        windows_per_class=per_class,
        seed=derive_seed(task.seed, party, _PHYS_STREAM),
    )
    x, y = gen_synthetic_visual(vis)
    feats, y_phys = physio_feature_matrix(gen_synthetic_physio(phys))
    assert np.array_equal(y, y_phys), "modalities must emit aligned labels"
    return ClientData(x=x, features=feats, y=y)


def make_client_data(task: MultimodalTaskConfig, client_id: int) -> ClientData:
    if not 0 <= client_id < task.n_clients:
        raise ValueError(f"client_id {client_id} out of range for {task.n_clients} clients")
    return _make_party(task, client_id, task.train_per_class)


def make_test_data(task: MultimodalTaskConfig) -> ClientData:
    return _make_party(task, TEST_PARTY, task.test_per_class)
