"""Physiological window features and visual preprocessing / augmentation."""

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

IMAGE_SIZE = 48
N_CLASSES = 7


class EmotionLabel(IntEnum):
    """Seven-class emotion coding, matching the FER2013 CSV convention."""

    ANGRY = 0
    DISGUST = 1
    FEAR = 2
    HAPPY = 3
    SAD = 4
    SURPRISE = 5
    NEUTRAL = 6


CLASS_NAMES = tuple(label.name.capitalize() for label in EmotionLabel)


class TooShort(ValueError):
    pass


class Empty(ValueError):
    pass


class SourceTooSmall(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass
class PhysioWindow:
    """Fixed-duration slice of the three normalized physiological channels.

    All channels must have the same length T >= 2. ``label`` is optional and
    carries the ground-truth emotion when known.
    """

    hr: np.ndarray
    eda: np.ndarray
    temp: np.ndarray
    sample_rate_hz: float
    label: EmotionLabel | None = None

    def __post_init__(self):
        self.hr = np.asarray(self.hr, dtype=np.float64)
        self.eda = np.asarray(self.eda, dtype=np.float64)
        self.temp = np.asarray(self.temp, dtype=np.float64)
        n = self.hr.size
        if self.eda.size != n or self.temp.size != n:
            raise ValueError(
                f"channel lengths differ: hr={n} eda={self.eda.size} temp={self.temp.size}"
            )
        if n < 2:
            raise TooShort(f"window needs >= 2 samples per channel, got {n}")
        for name, ch in (("hr", self.hr), ("eda", self.eda), ("temp", self.temp)):
            if not np.all(np.isfinite(ch)):
                raise ValueError(f"{name} channel contains non-finite values")

    @property
    def duration_s(self) -> float:
        return self.hr.size / self.sample_rate_hz


@dataclass(frozen=True)
class PhysioFeatures:
    """The 3-vector summary of one window: (hrv, eda_max, delta_t)."""

    hrv: float
    eda_max: float
    delta_t: float

    def as_array(self) -> np.ndarray:
        return np.array([self.hrv, self.eda_max, self.delta_t], dtype=np.float64)


@dataclass
class ImageTensor:
    """A 48x48 grayscale image with pixel values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} pixels, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise OutOfRange("pixel values must lie in [0, 1]")


def hrv(window: PhysioWindow) -> float:
    """Mean absolute difference between consecutive heart-rate samples."""
    hr = window.hr
    if hr.size < 2:
        raise TooShort("hrv needs at least 2 heart-rate samples")
    return float(np.abs(np.diff(hr)).sum() / (hr.size - 1))


def eda_max(window: PhysioWindow) -> float:
    """Maximum of the normalized EDA channel over the window."""
    if window.eda.size == 0:
        raise Empty("eda channel is empty")
    return float(window.eda.max())


def delta_t(window: PhysioWindow) -> float:
    """Peak-to-peak range of the skin-temperature channel."""
    if window.temp.size == 0:
        raise Empty("temp channel is empty")
    return float(window.temp.max() - window.temp.min())


def extract_physio_features(window: PhysioWindow) -> PhysioFeatures:
    """Bundle the three per-window features into one vector."""
    return PhysioFeatures(hrv=hrv(window), eda_max=eda_max(window), delta_t=delta_t(window))


def resize_image(raw: np.ndarray, src_h: int, src_w: int) -> ImageTensor:
    """Nearest-neighbor subsample a source grid down to 48x48.

    Output pixel (x', y') reads source pixel (floor(x' * src_h / 48),
    floor(y' * src_w / 48)). Both source dimensions must be at least 48.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (src_h, src_w):
        raise ValueError(f"raw shape {raw.shape} does not match ({src_h}, {src_w})")
    if src_h < IMAGE_SIZE or src_w < IMAGE_SIZE:
        raise SourceTooSmall(f"source {src_h}x{src_w} is smaller than {IMAGE_SIZE}x{IMAGE_SIZE}")
    xs = (np.arange(IMAGE_SIZE) * src_h) // IMAGE_SIZE
    ys = (np.arange(IMAGE_SIZE) * src_w) // IMAGE_SIZE
    return ImageTensor(raw[np.ix_(xs, ys)])


def rescale(image: np.ndarray) -> ImageTensor:
    """Map 8-bit pixel values [0, 255] to [0, 1] by dividing by 255."""
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 255:
        raise OutOfRange("expected pixel values in [0, 255]")
    return ImageTensor(image / 255.0)


@dataclass
class AugmentConfig:
    flip_probability: float = 0.5
    max_rotation_deg: float = 10.0


def augment(image: ImageTensor, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> ImageTensor:
    """Train-time augmentation: random horizontal flip, then a small rotation.

    The flip fires with ``cfg.flip_probability``; the rotation angle is drawn
    uniformly from [-max_rotation_deg, +max_rotation_deg] and applied about the
    image center with bilinear interpolation and zero padding. Deterministic
    for a given generator state.
    """
    pixels = image.pixels
    flip = rng.random() < cfg.flip_probability
    angle_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    if flip:
        pixels = pixels[:, ::-1]
    if angle_deg != 0.0:
        pixels = _rotate_bilinear(pixels, angle_deg)
    return ImageTensor(pixels.copy())


def augment_batch(
    batch: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()
) -> np.ndarray:
    """Apply ``augment`` to every image of an (N, 48, 48) batch.

    Consumes exactly two generator draws per image, in batch order. The
    output keeps the batch dtype so float32 training stays float32.
    """
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i] = augment(ImageTensor(batch[i]), rng, cfg).pixels
    return out


def _rotate_bilinear(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the center, sampling the source with bilinear weights.

    Destination pixels that map outside the source read as zero.
    """
    h, w = pixels.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)

    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # Inverse map: where does each destination pixel come from in the source.
    src_r = cos_t * rr + sin_t * cc + cy
    src_c = -sin_t * rr + cos_t * cc + cx

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    out = np.zeros_like(pixels)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        r = r0 + dr
        c = c0 + dc
        valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out[valid] += weight[valid] * pixels[r[valid], c[valid]]
    # Bilinear mixing of in-range values cannot leave [0, 1]; clip only the
    # harmless negative-zero style float dust.
    return np.clip(out, 0.0, 1.0)
