"""Decision-level fusion of the visual and physiological predictions.

Each modality contributes one probability vector per sample; fusion reduces
the pair to a single emotion label. When the per-modality argmax labels
agree, every policy returns that label. The policies only differ in how a
disagreement is settled:

  * ``INDICATOR_VOTE``: a two-way indicator vote; every disagreement is a
    1-1 tie, resolved to the lower-indexed label.
  * ``CONFIDENCE_TIE_BREAK`` (default): the modality with the higher peak
    probability wins; the lower-indexed label on an exact tie.
  * ``PROBABILITY_SUM``: argmax of the elementwise sum of both vectors.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .features import N_CLASSES, EmotionLabel

SUM_TOLERANCE = 1e-6


class InvalidProbability(ValueError):
    pass


class FusionPolicy(Enum):
    INDICATOR_VOTE = "indicator_vote"
    CONFIDENCE_TIE_BREAK = "confidence_tie_break"
    PROBABILITY_SUM = "probability_sum"

    @classmethod
    def parse(cls, text: str) -> "FusionPolicy":
        try:
            return cls(text.strip().lower())
        except ValueError:
            options = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown fusion mode {text!r}; expected one of: {options}") from None


DEFAULT_POLICY = FusionPolicy.CONFIDENCE_TIE_BREAK


@dataclass(frozen=True)
class ProbVector:
    """A distribution over the seven emotion classes."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if p.shape != (N_CLASSES,):
            raise InvalidProbability(f"expected {N_CLASSES} entries, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidProbability("probabilities must be finite")
        if p.min() < 0.0:
            raise InvalidProbability(f"negative probability {p.min()}")
        total = float(p.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise InvalidProbability(f"probabilities sum to {total}, not 1")

    @property
    def top(self) -> EmotionLabel:
        return EmotionLabel(int(self.probs.argmax()))

    @property
    def confidence(self) -> float:
        return float(self.probs.max())


def fuse(
    p_visual: ProbVector, p_physio: ProbVector, policy: FusionPolicy = DEFAULT_POLICY
) -> EmotionLabel:
    """Fuse one sample's two modality distributions into a label."""
    yv = p_visual.top
    yp = p_physio.top
    if yv == yp:
        return yv
    if policy is FusionPolicy.INDICATOR_VOTE:
        return min(yv, yp)
    if policy is FusionPolicy.CONFIDENCE_TIE_BREAK:
        cv = p_visual.confidence
        cp = p_physio.confidence
        if cv > cp:
            return yv
        if cp > cv:
            return yp
        return min(yv, yp)
    return EmotionLabel(int((p_visual.probs + p_physio.probs).argmax()))


def fuse_batch(
    p_visual: np.ndarray, p_physio: np.ndarray, policy: FusionPolicy = DEFAULT_POLICY
) -> np.ndarray:
    """Row-wise ``fuse`` over (N, 7) probability matrices.

    Validates every row and returns an int64 label array.
    """
    pv = np.asarray(p_visual, dtype=np.float64)
    pp = np.asarray(p_physio, dtype=np.float64)
    if pv.shape != pp.shape or pv.ndim != 2 or pv.shape[1] != N_CLASSES:
        raise InvalidProbability(f"shape mismatch: {pv.shape} vs {pp.shape}")
    for mat in (pv, pp):
        if not np.all(np.isfinite(mat)):
            raise InvalidProbability("probabilities must be finite")
        if mat.min() < 0.0:
            raise InvalidProbability(f"negative probability {mat.min()}")
        bad = np.abs(mat.sum(axis=1) - 1.0) > SUM_TOLERANCE
        if bad.any():
            row = int(np.nonzero(bad)[0][0])
            raise InvalidProbability(f"row {row} sums to {mat[row].sum()}, not 1")

    yv = pv.argmax(axis=1)
    yp = pp.argmax(axis=1)
    agree = yv == yp
    if policy is FusionPolicy.INDICATOR_VOTE:
        out = np.minimum(yv, yp)
    elif policy is FusionPolicy.CONFIDENCE_TIE_BREAK:
        cv = pv.max(axis=1)
        cp = pp.max(axis=1)
        out = np.where(cv > cp, yv, np.where(cp > cv, yp, np.minimum(yv, yp)))
    else:
        out = (pv + pp).argmax(axis=1)
    return np.where(agree, yv, out).astype(np.int64)
