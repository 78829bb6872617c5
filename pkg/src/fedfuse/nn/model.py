"""CNN definition: three conv/pool/dropout blocks feeding two dense layers."""

from dataclasses import dataclass, field

import numpy as np

from . import layers


@dataclass(frozen=True)
class CnnConfig:
    """Shape of the visual classifier.

    The default is the production architecture: 48x48 grayscale in, three
    3x3 conv blocks (32, 64, 128 channels) each followed by ReLU, 2x2 max
    pooling and dropout 0.25, then a 1024-unit ReLU dense layer with dropout
    0.5 and a 7-way softmax head.
    """

    input_size: int = 48
    conv_channels: tuple[int, ...] = (32, 64, 128)
    dense_units: int = 1024
    n_classes: int = 7
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5
    dtype: type = np.float32

    def __post_init__(self):
        if self.input_size % (2 ** len(self.conv_channels)) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by "
                f"2^{len(self.conv_channels)} pooling stages"
            )
        if not self.conv_channels:
            raise ValueError("need at least one conv block")

    @property
    def flat_features(self) -> int:
        side = self.input_size // (2 ** len(self.conv_channels))
        return side * side * self.conv_channels[-1]


class ModelWeights:
    """Ordered name -> float array mapping for every trainable parameter."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = dict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self._arrays:
            raise KeyError(f"unknown parameter {name!r}")
        if value.shape != self._arrays[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {value.shape} vs {self._arrays[name].shape}"
            )
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self._arrays.items()})

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights({k: v.astype(dtype) for k, v in self._arrays.items()})

    @property
    def param_count(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def equal(self, other: "ModelWeights") -> bool:
        """Bitwise equality: same names, shapes, and every element identical."""
        if self.names() != other.names():
            return False
        return all(
            v.shape == other[k].shape and np.array_equal(v, other[k], equal_nan=True)
            for k, v in self.items()
        )


@dataclass
class ForwardCache:
    caches: list = field(default_factory=list)
    masks: dict[str, np.ndarray] = field(default_factory=dict)


class CnnModel:
    """Functional-style model: weights are passed in, never stored."""

    def __init__(self, config: CnnConfig = CnnConfig()):
        self.config = config

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        for i, cout in enumerate(cfg.conv_channels, start=1):
            shapes[f"conv{i}_w"] = (3, 3, cin, cout)
            shapes[f"conv{i}_b"] = (cout,)
            cin = cout
        shapes["dense1_w"] = (cfg.flat_features, cfg.dense_units)
        shapes["dense1_b"] = (cfg.dense_units,)
        shapes["dense2_w"] = (cfg.dense_units, cfg.n_classes)
        shapes["dense2_b"] = (cfg.n_classes,)
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def init_weights(self, seed: int) -> ModelWeights:
        """He-style uniform fan-in init for weights, zeros for biases.

        The draw order over parameters is fixed, so a given seed always
        produces identical weights.
        """
        rng = np.random.default_rng(seed)
        dtype = self.config.dtype
        arrays = {}
        for name, shape in self.param_shapes().items():
            if name.endswith("_b"):
                arrays[name] = np.zeros(shape, dtype=dtype)
                continue
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
            else:
                fan_in = shape[0]
            limit = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        return ModelWeights(arrays)

    def forward(self, weights: ModelWeights, x: np.ndarray, rng=None, masks=None):
        """Run the network; returns (logits, cache).

        Passing ``rng`` enables dropout with fresh masks (training mode);
        passing ``masks`` replays previously drawn masks; with neither the
        pass is deterministic evaluation.
        """
        cfg = self.config
        x = np.asarray(x, dtype=cfg.dtype)
        if x.ndim == 3:
            x = x[:, :, :, None]
        if x.shape[1:] != (cfg.input_size, cfg.input_size, 1):
            raise ValueError(f"expected (N, {cfg.input_size}, {cfg.input_size}[, 1]), got {x.shape}")

        train = rng is not None or masks is not None
        fc = ForwardCache()
        out = x
        for i in range(1, len(cfg.conv_channels) + 1):
            out, c = layers.conv3x3_forward(out, weights[f"conv{i}_w"], weights[f"conv{i}_b"])
            fc.caches.append(("conv", c))
            out, c = layers.relu_forward(out)
            fc.caches.append(("relu", c))
            out, c = layers.maxpool2_forward(out)
            fc.caches.append(("pool", c))
            if train:
                m = self._mask(f"drop{i}", out.shape, cfg.conv_dropout, rng, masks, fc)
                out, c = layers.dropout_forward(out, m)
                fc.caches.append(("drop", c))

        n = out.shape[0]
        out = out.reshape(n, cfg.flat_features)
        fc.caches.append(("flatten", None))

        out, c = layers.dense_forward(out, weights["dense1_w"], weights["dense1_b"])
        fc.caches.append(("dense1", c))
        out, c = layers.relu_forward(out)
        fc.caches.append(("relu", c))
        if train:
            k = len(cfg.conv_channels) + 1
            m = self._mask(f"drop{k}", out.shape, cfg.dense_dropout, rng, masks, fc)
            out, c = layers.dropout_forward(out, m)
            fc.caches.append(("drop", c))
        logits, c = layers.dense_forward(out, weights["dense2_w"], weights["dense2_b"])
        fc.caches.append(("dense2", c))
        return logits, fc

    def _mask(self, name, shape, p, rng, masks, fc):
        if masks is not None:
            m = masks[name]
            if m.shape != shape:
                raise ValueError(f"mask {name} shape {m.shape} does not match {shape}")
        else:
            m = layers.dropout_mask(shape, p, rng, self.config.dtype)
        fc.masks[name] = m
        return m

    def backward(self, fc: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Full backward pass; returns gradients keyed like the weights.

        Consumes ``fc.caches``: each layer's cache is released as soon as
        its gradient is computed, which caps peak memory. A cache therefore
        drives exactly one backward pass (``fc.masks`` survives for replay).
        """
        cfg = self.config
        grads: dict[str, np.ndarray] = {}
        d = dlogits
        conv_idx = len(cfg.conv_channels)
        while fc.caches:
            kind, cache = fc.caches.pop()
            if kind == "dense2":
                d, grads["dense2_w"], grads["dense2_b"] = layers.dense_backward(d, cache)
            elif kind == "dense1":
                d, grads["dense1_w"], grads["dense1_b"] = layers.dense_backward(d, cache)
            elif kind == "relu":
                d = layers.relu_backward(d, cache)
            elif kind == "drop":
                d = layers.dropout_backward(d, cache)
            elif kind == "flatten":
                n = d.shape[0]
                side = cfg.input_size // (2 ** len(cfg.conv_channels))
                d = d.reshape(n, side, side, cfg.conv_channels[-1])
            elif kind == "pool":
                d = layers.maxpool2_backward(d, cache)
            elif kind == "conv":
                d, grads[f"conv{conv_idx}_w"], grads[f"conv{conv_idx}_b"] = layers.conv3x3_backward(
                    d, cache
                )
                conv_idx -= 1
            else:
                raise AssertionError(f"unknown cache kind {kind!r}")
            del cache
        return grads

    def loss_and_grads(self, weights: ModelWeights, x, labels, rng=None, masks=None):
        """Training step math: forward, cross-entropy, full backward.

        Returns (loss, probs, grads, cache); probs are float64.
        """
        logits, fc = self.forward(weights, x, rng=rng, masks=masks)
        loss, probs, dz = layers.softmax_cross_entropy(logits, labels)
        grads = self.backward(fc, dz)
        return loss, probs, grads, fc

    def predict_proba(self, weights: ModelWeights, x, batch_size: int = 32) -> np.ndarray:
        """Deterministic class probabilities, evaluated in batches."""
        x = np.asarray(x)
        out = np.empty((x.shape[0], self.config.n_classes), dtype=np.float64)
        for start in range(0, x.shape[0], batch_size):
            logits, fc = self.forward(weights, x[start : start + batch_size])
            del fc
            out[start : start + logits.shape[0]] = layers.softmax(logits)
        return out
