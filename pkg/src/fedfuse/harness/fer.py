"""FER2013-format CSV ingestion and desk-scale subset selection.

The expected file is the standard three-column CSV: emotion (0-6), a
space-separated string of 2304 pixels, and a usage split tag. The dataset
itself is not redistributed; users supply their own copy.
"""

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ..features import IMAGE_SIZE, EmotionLabel, rescale

log = logging.getLogger(__name__)

N_PIXELS = IMAGE_SIZE * IMAGE_SIZE
EXPECTED_HEADER = ["emotion", "pixels", "Usage"]


class MissingFile(OSError):
    pass


class BadHeader(ValueError):
    pass


class MalformedRow(ValueError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row


class Usage(Enum):
    TRAINING = "Training"
    PUBLIC_TEST = "PublicTest"
    PRIVATE_TEST = "PrivateTest"


@dataclass(frozen=True)
class FerRecord:
    label: EmotionLabel
    pixels: np.ndarray
    usage: Usage


def load_fer_csv(path) -> list[FerRecord]:
    """Parse every row, failing with the offending row index on bad input.

    Row indices are 1-based over data rows (the header is row 0).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    records: list[FerRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise BadHeader("empty file") from None
        if header != EXPECTED_HEADER:
            raise BadHeader(f"expected header {EXPECTED_HEADER}, got {header}")
        for row_idx, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(row_idx, f"expected 3 fields, got {len(row)}")
            emotion_s, pixels_s, usage_s = row
            try:
                label = EmotionLabel(int(emotion_s))
            except ValueError:
                raise MalformedRow(row_idx, f"bad emotion {emotion_s!r}") from None
            try:
                pixels = np.array(pixels_s.split(), dtype=np.int16)
            except ValueError:
                raise MalformedRow(row_idx, "non-numeric pixel value") from None
            if pixels.size != N_PIXELS:
                raise MalformedRow(row_idx, f"expected {N_PIXELS} pixels, got {pixels.size}")
            if pixels.min() < 0 or pixels.max() > 255:
                raise MalformedRow(row_idx, "pixel value outside [0, 255]")
            try:
                usage = Usage(usage_s)
            except ValueError:
                raise MalformedRow(row_idx, f"bad usage {usage_s!r}") from None
            records.append(FerRecord(label, pixels.astype(np.uint8), usage))
    counts = Counter(r.usage.value for r in records)
    log.info(
        "loaded %d rows from %s (%s)",
        len(records),
        path.name,
        ", ".join(f"{k}: {v}" for k, v in sorted(counts.items())) or "empty",
    )
    return records


def records_to_arrays(records: list[FerRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into ((N, 48, 48) images in [0, 1], (N,) labels)."""
    if not records:
        return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE)), np.zeros(0, dtype=np.int64)
    x = np.stack([rescale(r.pixels.reshape(IMAGE_SIZE, IMAGE_SIZE)).pixels for r in records])
    y = np.array([int(r.label) for r in records], dtype=np.int64)
    return x, y


def stratified_subset(
    records: list[FerRecord], usage: Usage, per_class: int, seed
) -> list[FerRecord]:
    """Pick ``per_class`` records of each emotion from one usage split.

    Selection is a seeded draw without replacement; classes with fewer rows
    than requested contribute everything they have.
    """
    rng = np.random.default_rng(seed)
    pool = [r for r in records if r.usage is usage]
    chosen: list[FerRecord] = []
    for label in EmotionLabel:
        members = [r for r in pool if r.label is label]
        if len(members) > per_class:
            idx = rng.choice(len(members), size=per_class, replace=False)
            members = [members[i] for i in sorted(idx)]
        chosen.extend(members)
    return chosen
