"""Random forest over physiological feature vectors, built from scratch.

Forests are trained and kept per client; they are never aggregated across
the federation. Out-of-bag tracking gives a free validation estimate, and
``to_bytes``/``from_bytes`` provide a versioned binary round trip.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"FRF1"
FORMAT_VERSION = 1


class NotFitted(RuntimeError):
    pass


class CorruptForest(ValueError):
    pass


class UnsupportedVersion(CorruptForest):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    # features drawn without replacement per node
    m_try: int = 2
    min_samples_split: int = 2
    n_classes: int = 7

    def __post_init__(self):
        if self.n_trees < 1 or self.m_try < 1 or self.n_classes < 2:
            raise ValueError("n_trees, m_try >= 1 and n_classes >= 2 required")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass
class Tree:
    """Flat node arrays. ``feature`` is -1 at leaves; ``dist`` holds the
    class frequencies of the training samples that reached each node."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    dist: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size


def _best_split_for_feature(v, ys, n_classes):
    """Lowest weighted-Gini midpoint split of one feature column.

    Returns (score, threshold) or None when all values coincide. Equal
    scores resolve to the lowest threshold via first-occurrence argmin.
    """
    order = np.argsort(v, kind="stable")
    vs = v[order]
    yo = ys[order]
    n = v.size
    cand = np.nonzero(vs[:-1] < vs[1:])[0]
    if cand.size == 0:
        return None
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), yo] = 1.0
    cum = onehot.cumsum(axis=0)
    nl = (cand + 1).astype(np.float64)
    nr = n - nl
    cl = cum[cand]
    cr = cum[-1] - cl
    gini_l = 1.0 - ((cl / nl[:, None]) ** 2).sum(axis=1)
    gini_r = 1.0 - ((cr / nr[:, None]) ** 2).sum(axis=1)
    score = (nl * gini_l + nr * gini_r) / n
    k = int(np.argmin(score))
    thr = (vs[cand[k]] + vs[cand[k] + 1]) / 2.0
    return float(score[k]), thr


def _grow_tree(x, y, cfg: ForestConfig, rng: np.random.Generator):
    """One tree from one bootstrap draw; returns (Tree, oob_mask)."""
    n = x.shape[0]
    boot = rng.integers(0, n, size=n)
    oob = np.ones(n, dtype=bool)
    oob[boot] = False

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    dist: list[np.ndarray] = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        dist.append(np.zeros(cfg.n_classes))
        return len(feature) - 1

    stack = [(new_node(), boot)]
    while stack:
        node, idx = stack.pop()
        ys = y[idx]
        counts = np.bincount(ys, minlength=cfg.n_classes).astype(np.float64)
        dist[node] = counts / idx.size
        if idx.size < cfg.min_samples_split or counts.max() == idx.size:
            continue
        m = min(cfg.m_try, x.shape[1])
        feats = np.sort(rng.choice(x.shape[1], size=m, replace=False))
        best = None
        for f in feats:
            res = _best_split_for_feature(x[idx, f], ys, cfg.n_classes)
            if res is None:
                continue
            score, thr = res
            # strict < keeps the lowest feature index on a tied score
            if best is None or score < best[0]:
                best = (score, int(f), thr)
        if best is None:
            continue
        _, f, thr = best
        feature[node] = f
        threshold[node] = thr
        lmask = x[idx, f] <= thr
        lid = new_node()
        rid = new_node()
        left[node] = lid
        right[node] = rid
        stack.append((rid, idx[~lmask]))
        stack.append((lid, idx[lmask]))

    tree = Tree(
        feature=np.asarray(feature, dtype=np.int16),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        dist=np.asarray(dist, dtype=np.float64),
    )
    return tree, oob


def _tree_proba(tree: Tree, x: np.ndarray) -> np.ndarray:
    """Route every row to its leaf; returns the leaf distributions."""
    node = np.zeros(x.shape[0], dtype=np.int64)
    while True:
        f = tree.feature[node]
        internal = f >= 0
        if not internal.any():
            break
        rows = np.nonzero(internal)[0]
        go_left = x[rows, f[rows]] <= tree.threshold[node[rows]]
        node[rows] = np.where(go_left, tree.left[node[rows]], tree.right[node[rows]])
    return tree.dist[node]


class RandomForest:
    def __init__(self, config: ForestConfig = ForestConfig()):
        self.config = config
        self.trees: list[Tree] = []
        self.oob_score: float | None = None

    @property
    def fitted(self) -> bool:
        return bool(self.trees)

    def fit(self, x: np.ndarray, y: np.ndarray, seed: int) -> "RandomForest":
        """Grow the whole forest from bootstrap resamples of (x, y).

        Also accumulates the out-of-bag accuracy over samples left out of at
        least one bootstrap (None when every sample landed in every bag).
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"bad shapes: x {x.shape}, y {y.shape}")
        if x.shape[0] == 0:
            raise ValueError("cannot fit on an empty dataset")
        if y.min() < 0 or y.max() >= self.config.n_classes:
            raise ValueError(f"labels must lie in [0, {self.config.n_classes})")

        rng = np.random.default_rng(seed)
        self.trees = []
        oob_sum = np.zeros((x.shape[0], self.config.n_classes))
        oob_hits = np.zeros(x.shape[0], dtype=np.int64)
        for _ in range(self.config.n_trees):
            tree, oob = _grow_tree(x, y, self.config, rng)
            self.trees.append(tree)
            if oob.any():
                oob_sum[oob] += _tree_proba(tree, x[oob])
                oob_hits[oob] += 1
        seen = oob_hits > 0
        if seen.any():
            pred = oob_sum[seen].argmax(axis=1)
            self.oob_score = float((pred == y[seen]).mean())
        else:
            self.oob_score = None
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Soft vote: mean of the leaf class distributions across trees."""
        if not self.fitted:
            raise NotFitted("call fit before predict")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"expected 2-d features, got shape {x.shape}")
        acc = np.zeros((x.shape[0], self.config.n_classes))
        for tree in self.trees:
            acc += _tree_proba(tree, x)
        return acc / len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        # argmax takes the first maximum, so ties fall to the lowest label
        return self.predict_proba(x).argmax(axis=1)

    def to_bytes(self) -> bytes:
        """Versioned binary dump with a trailing CRC32."""
        if not self.fitted:
            raise NotFitted("nothing to serialize")
        cfg = self.config
        oob = float("nan") if self.oob_score is None else self.oob_score
        parts = [
            MAGIC,
            struct.pack(
                "<HIHIHd",
                FORMAT_VERSION,
                cfg.n_trees,
                cfg.m_try,
                cfg.min_samples_split,
                cfg.n_classes,
                oob,
            ),
        ]
        for tree in self.trees:
            parts.append(struct.pack("<I", tree.n_nodes))
            parts.append(tree.feature.astype("<i2").tobytes())
            parts.append(tree.threshold.astype("<f8").tobytes())
            parts.append(tree.left.astype("<i4").tobytes())
            parts.append(tree.right.astype("<i4").tobytes())
            parts.append(tree.dist.astype("<f8").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RandomForest":
        if len(blob) < len(MAGIC) + 4:
            raise CorruptForest("blob too short")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptForest("checksum mismatch")
        if body[:4] != MAGIC:
            raise CorruptForest(f"bad magic {body[:4]!r}")
        off = 4
        version, n_trees, m_try, mss, n_classes, oob = struct.unpack_from("<HIHIHd", body, off)
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"format version {version} not supported")
        off += struct.calcsize("<HIHIHd")
        forest = cls(
            ForestConfig(n_trees=n_trees, m_try=m_try, min_samples_split=mss, n_classes=n_classes)
        )
        forest.oob_score = None if np.isnan(oob) else oob
        try:
            for _ in range(n_trees):
                (n_nodes,) = struct.unpack_from("<I", body, off)
                off += 4
                arrays = []
                for dtype, per in (("<i2", 1), ("<f8", 1), ("<i4", 1), ("<i4", 1), ("<f8", n_classes)):
                    count = n_nodes * per
                    nbytes = count * np.dtype(dtype).itemsize
                    if off + nbytes > len(body):
                        raise CorruptForest("truncated tree data")
                    arrays.append(np.frombuffer(body, dtype=dtype, count=count, offset=off).copy())
                    off += nbytes
                feat, thr, left, right, dist = arrays
                forest.trees.append(
                    Tree(
                        feature=feat.astype(np.int16),
                        threshold=thr.astype(np.float64),
                        left=left.astype(np.int32),
                        right=right.astype(np.int32),
                        dist=dist.astype(np.float64).reshape(n_nodes, n_classes),
                    )
                )
        except struct.error as exc:
            raise CorruptForest("truncated header") from exc
        if off != len(body):
            raise CorruptForest(f"{len(body) - off} trailing bytes")
        return forest
