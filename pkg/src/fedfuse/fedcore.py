"""Federated averaging, the server round loop, and the client training step.

Only CNN weights travel through the federation; random forests stay on
their clients. The server owns the round state machine; clients are
single-threaded loops that train for a fixed number of local epochs per
round and report full updated weights.
"""

import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import transport
from .nn import Adam, AdamConfig, CnnConfig, CnnModel, ModelWeights, evaluate, train_local
from .transport import Kind, Message

log = logging.getLogger(__name__)

VAL_FRACTION = 0.1

# Per-client substream tags so the split, minibatch, and forest draws never
# share a generator.
STREAM_SPLIT = 1
STREAM_TRAIN = 2
STREAM_FOREST = 3

_UPDATE_PREFIX = struct.Struct("<Iddd")


class EmptyUpdateSet(ValueError):
    pass


class MixedRounds(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class NoUpdatesReceived(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 3
    rounds: int = 20
    local_epochs: int = 4
    straggler_timeout: float = 120.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("n_clients, rounds, local_epochs must all be >= 1")
        if self.straggler_timeout <= 0:
            raise ValueError("straggler_timeout must be positive")


@dataclass(frozen=True)
class UpdateMetrics:
    loss: float
    accuracy: float
    peak_rss_mb: float = float("nan")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    round: int
    weights: ModelWeights
    sample_count: int
    metrics: UpdateMetrics

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


@dataclass
class RoundRecord:
    round: int
    loss: float
    accuracy: float
    wall_s: float
    received: tuple[int, ...]
    peak_rss_mb: float = float("nan")


@dataclass
class RoundState:
    round_index: int
    global_weights: ModelWeights
    expected_clients: frozenset[int]
    received: dict[int, ClientUpdate] = field(default_factory=dict)
    deadline: float = 0.0
    history: list[RoundRecord] = field(default_factory=list)


@dataclass
class FederationHistory:
    records: list[RoundRecord]
    final_weights: ModelWeights

    @property
    def rounds_run(self) -> int:
        return len(self.records)


@dataclass
class LocalDataset:
    """One client's visual training data: images in [0, 1] plus labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] == 0:
            raise EmptyDataset("client dataset is empty")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"{self.x.shape[0]} samples but labels shaped {self.y.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]


def peak_rss_mb() -> float:
    """High-water-mark resident set size of this process, in MiB."""
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    import resource

    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def fedavg(updates: list[ClientUpdate]) -> ModelWeights:
    """Sample-count-weighted mean of client weights (float64 output).

    Updates are processed in client-id order, so any input permutation
    produces identical bytes. Sample counts are divided by their gcd first;
    scaling every count by a common factor therefore cannot change the
    arithmetic at all.
    """
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    if len({u.round for u in updates}) > 1:
        raise MixedRounds(f"updates span rounds {sorted({u.round for u in updates})}")
    names = updates[0].weights.names()
    shapes = {n: updates[0].weights[n].shape for n in names}
    for u in updates[1:]:
        if u.weights.names() != names or any(u.weights[n].shape != shapes[n] for n in names):
            raise ShapeMismatch(f"client {u.client_id} weights do not match the first update")

    g = 0
    for u in updates:
        g = math.gcd(g, u.sample_count)
    counts = [u.sample_count // g for u in updates]
    total = float(sum(counts))
    out = {}
    for name in names:
        acc = np.zeros(shapes[name], dtype=np.float64)
        for m, u in zip(counts, updates):
            acc += m * u.weights[name].astype(np.float64)
        out[name] = acc / total
    return ModelWeights(out)


def split_local(n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) index split with a 10% holdout.

    Datasets of a single sample get no holdout; validation then falls back
    to the training sample itself.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, round(n * VAL_FRACTION)) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class ClientTrainer:
    """Holds everything a client keeps between rounds: optimizer moments,
    the minibatch generator, and the cumulative epoch count driving the
    learning-rate decay. Resetting any of these per round would break the
    equivalence between R federated rounds and R*E plain local epochs."""

    def __init__(
        self,
        client_id: int,
        data: LocalDataset,
        cfg: FederationConfig,
        *,
        model: CnnModel | None = None,
        adam_config: AdamConfig = AdamConfig(),
        batch_size: int = 32,
        augment_fn=None,
    ):
        self.client_id = client_id
        self.cfg = cfg
        self.model = model if model is not None else CnnModel()
        self.adam = Adam(adam_config)
        self.batch_size = batch_size
        self.augment_fn = augment_fn
        self.epochs_done = 0
        self.rng = np.random.default_rng([cfg.seed, client_id, STREAM_TRAIN])

        self.data = data
        tr, va = split_local(len(data), [cfg.seed, client_id, STREAM_SPLIT])
        self.x_train = data.x[tr]
        self.y_train = data.y[tr]
        if va.size:
            self.x_val = data.x[va]
            self.y_val = data.y[va]
        else:
            self.x_val = self.x_train
            self.y_val = self.y_train

    def step(
        self, global_weights: ModelWeights, round_index: int, *, owned: bool = False
    ) -> ClientUpdate:
        """One federated round of local work: load, train E epochs, report.

        ``owned=True`` promises the arrays are writable, already the model
        dtype, and exclusively this trainer's; training then runs on them
        in place instead of on a defensive copy. Callers that share the
        broadcast arrays (or hold read-only views) must leave it False.
        """
        expected = self.model.param_shapes()
        got = {n: global_weights[n].shape for n in global_weights.names()}
        if got != expected:
            raise ShapeMismatch("global weights do not fit the local model")
        weights = global_weights if owned else global_weights.astype(self.model.config.dtype)
        stats = train_local(
            self.model,
            weights,
            self.x_train,
            self.y_train,
            epochs=self.cfg.local_epochs,
            batch_size=self.batch_size,
            adam=self.adam,
            rng=self.rng,
            epochs_done=self.epochs_done,
            augment_fn=self.augment_fn,
        )
        self.epochs_done = stats.epochs_done
        val_loss, val_acc = evaluate(self.model, weights, self.x_val, self.y_val)
        return ClientUpdate(
            client_id=self.client_id,
            round=round_index,
            weights=weights,
            sample_count=len(self.data),
            metrics=UpdateMetrics(loss=val_loss, accuracy=val_acc, peak_rss_mb=peak_rss_mb()),
        )


def client_step(
    global_weights: ModelWeights,
    data: LocalDataset,
    cfg: FederationConfig,
    seed: int,
    *,
    client_id: int = 0,
    model: CnnModel | None = None,
) -> ClientUpdate:
    """One-shot client round with fresh optimizer state (round 0 semantics)."""
    trainer = ClientTrainer(client_id, data, replace(cfg, seed=seed), model=model)
    return trainer.step(global_weights, 0)


def encode_update(update: ClientUpdate) -> bytes:
    prefix = _UPDATE_PREFIX.pack(
        update.sample_count,
        update.metrics.loss,
        update.metrics.accuracy,
        update.metrics.peak_rss_mb,
    )
    return prefix + transport.serialize_weights(update.weights)


def decode_update(msg: Message) -> ClientUpdate:
    if len(msg.payload) < _UPDATE_PREFIX.size:
        raise transport.Truncated("update payload too short")
    m_n, loss, acc, rss = _UPDATE_PREFIX.unpack_from(msg.payload)
    weights = transport.deserialize_weights(memoryview(msg.payload)[_UPDATE_PREFIX.size :])
    return ClientUpdate(
        client_id=msg.client_id,
        round=msg.round,
        weights=weights,
        sample_count=m_n,
        metrics=UpdateMetrics(loss=loss, accuracy=acc, peak_rss_mb=rss),
    )


class FederationServer:
    """Round coordinator. Works against any server endpoint exposing
    accept_all/send/broadcast/recv/close (loopback or TCP)."""

    def __init__(self, cfg: FederationConfig, end, *, model: CnnModel | None = None):
        self.cfg = cfg
        self.end = end
        self.model = model if model is not None else CnnModel()
        init = self.model.init_weights(cfg.seed)
        self.state = RoundState(
            round_index=0,
            global_weights=init,
            expected_clients=frozenset(range(cfg.n_clients)),
        )

    def run(self) -> FederationHistory:
        self._handshake()
        try:
            for _ in range(self.cfg.rounds):
                self._run_round()
            blob = transport.serialize_weights(self.state.global_weights)
            self.end.broadcast(
                lambda cid: Message(Kind.SHUTDOWN, self.state.round_index, cid, blob)
            )
        finally:
            self.end.close()
        return FederationHistory(
            records=self.state.history, final_weights=self.state.global_weights
        )

    def _handshake(self):
        self.end.accept_all()
        pending = set(self.state.expected_clients)
        deadline = time.monotonic() + self.cfg.straggler_timeout
        while pending:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"clients {sorted(pending)} never said hello")
            msg = self.end.recv(timeout=remaining)
            if msg.kind is Kind.HELLO and msg.client_id in pending:
                pending.discard(msg.client_id)
                self.end.send(msg.client_id, Message(Kind.WELCOME, 0, msg.client_id))
            else:
                log.warning("ignoring %s from client %d during handshake", msg.kind.name, msg.client_id)

    def _run_round(self):
        state = self.state
        t0 = time.perf_counter()
        received = self._collect(state.round_index)
        if not received:
            log.warning("round %d: no updates before the deadline, retrying once", state.round_index)
            received = self._collect(state.round_index)
            if not received:
                raise NoUpdatesReceived(f"round {state.round_index}: no client reported twice")
        state.received = received
        updates = list(received.values())
        merged = fedavg(updates)
        state.global_weights = merged.astype(self.model.config.dtype)

        weights_total = sum(u.sample_count for u in updates)
        loss = sum(u.sample_count * u.metrics.loss for u in updates) / weights_total
        acc = sum(u.sample_count * u.metrics.accuracy for u in updates) / weights_total
        rss = [u.metrics.peak_rss_mb for u in updates if not math.isnan(u.metrics.peak_rss_mb)]
        record = RoundRecord(
            round=state.round_index,
            loss=loss,
            accuracy=acc,
            wall_s=time.perf_counter() - t0,
            received=tuple(sorted(received)),
            peak_rss_mb=max(rss) if rss else float("nan"),
        )
        state.history.append(record)
        log.info(
            "round %d: %d/%d clients, val loss %.4f, val acc %.4f, %.1fs",
            state.round_index,
            len(received),
            len(state.expected_clients),
            loss,
            acc,
            record.wall_s,
        )
        state.round_index += 1
        state.received = {}

    def _collect(self, round_index: int) -> dict[int, ClientUpdate]:
        blob = transport.serialize_weights(self.state.global_weights)
        self.end.broadcast(lambda cid: Message(Kind.GLOBAL_MODEL, round_index, cid, blob))
        received: dict[int, ClientUpdate] = {}
        deadline = time.monotonic() + self.cfg.straggler_timeout
        self.state.deadline = deadline
        while len(received) < len(self.state.expected_clients):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            try:
                msg = self.end.recv(timeout=remaining)
            except TimeoutError:
                break
            if msg.kind is not Kind.UPDATE:
                log.warning("ignoring %s mid-round", msg.kind.name)
                continue
            if msg.round != round_index:
                log.warning(
                    "dropping stale round-%d update from client %d", msg.round, msg.client_id
                )
                continue
            if msg.client_id not in self.state.expected_clients or msg.client_id in received:
                log.warning("dropping unexpected update from client %d", msg.client_id)
                continue
            received[msg.client_id] = decode_update(msg)
        missing = sorted(self.state.expected_clients - set(received))
        if missing and received:
            log.warning("round %d: timed out waiting for clients %s", round_index, missing)
        return received


class ClientRunner:
    """Client message loop: hello, then train on every global model until
    the server shuts the federation down."""

    def __init__(self, end, trainer: ClientTrainer):
        self.end = end
        self.trainer = trainer
        self.final_weights: ModelWeights | None = None

    def run(self, timeout: float | None = None):
        cid = self.trainer.client_id
        self.end.send(Message(Kind.HELLO, 0, cid))
        welcome = self.end.recv(timeout=timeout)
        if welcome.kind is not Kind.WELCOME:
            raise transport.MalformedFrame(f"expected WELCOME, got {welcome.kind.name}")
        try:
            while True:
                msg = self.end.recv(timeout=timeout)
                if msg.kind is Kind.SHUTDOWN:
                    if msg.payload:
                        self.final_weights = transport.deserialize_weights(msg.payload)
                    break
                if msg.kind is not Kind.GLOBAL_MODEL:
                    log.warning("client %d ignoring %s", cid, msg.kind.name)
                    continue
                # materialize one owned copy, then drop every reference to
                # the ~20 MB frame so it is gone before training peaks
                rnd = msg.round
                weights = transport.deserialize_weights(msg.payload)
                weights = weights.astype(self.trainer.model.config.dtype)
                msg = None
                update = self.trainer.step(weights, rnd, owned=True)
                weights = None
                payload = encode_update(update)
                update = None
                self.end.send(Message(Kind.UPDATE, rnd, cid, payload))
                payload = None
        finally:
            self.end.close()


def run_federation(
    cfg: FederationConfig,
    datasets: list[LocalDataset],
    *,
    model_config: CnnConfig | None = None,
    adam_config: AdamConfig = AdamConfig(),
    batch_size: int = 32,
    augment_fn=None,
) -> FederationHistory:
    """In-process federation over the loopback transport.

    Spawns one trainer thread per client and coordinates rounds in the
    calling thread. Deterministic for a given config seed: thread timing
    cannot reach the arithmetic because aggregation orders by client id.
    """
    import threading

    if len(datasets) != cfg.n_clients:
        raise ValueError(f"{cfg.n_clients} clients but {len(datasets)} datasets")
    lb = transport.LoopbackTransport(cfg.n_clients)

    def make_model():
        return CnnModel(model_config) if model_config is not None else CnnModel()

    server = FederationServer(cfg, lb.server_end(), model=make_model())

    errors: list[BaseException] = []

    def run_client(cid: int):
        trainer = ClientTrainer(
            cid,
            datasets[cid],
            cfg,
            model=make_model(),
            adam_config=adam_config,
            batch_size=batch_size,
            augment_fn=augment_fn,
        )
        try:
            ClientRunner(lb.client_end(cid), trainer).run(timeout=cfg.straggler_timeout * 4)
        except transport.ChannelClosed:
            pass
        except BaseException as exc:
            errors.append(exc)

    threads = [
        threading.Thread(target=run_client, args=(cid,), daemon=True)
        for cid in range(cfg.n_clients)
    ]
    for t in threads:
        t.start()
    history = server.run()
    for t in threads:
        t.join(timeout=30)
    if errors:
        raise errors[0]
    return history
