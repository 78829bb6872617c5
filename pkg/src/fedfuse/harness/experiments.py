"""Drivers for the three training paradigms on the synthetic task.

``run_individual`` trains on one client's shard, ``run_centralized`` pools
every shard, ``run_federated`` runs the averaging protocol (in process or
over real sockets with one subprocess per client). All three evaluate the
same way afterwards: the network scores the images, a forest scores the
physio features, and the per-sample decisions are fused. The reports are
therefore directly comparable across modes.
"""

import logging
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..config import RunConfig, format_config
from ..features import N_CLASSES, AugmentConfig, augment_batch
from ..fedcore import (
    STREAM_FOREST,
    STREAM_SPLIT,
    STREAM_TRAIN,
    FederationHistory,
    FederationServer,
    LocalDataset,
    run_federation,
    split_local,
)
from ..forest import RandomForest
from ..fusion import FusionPolicy, fuse_batch
from ..nn import Adam, CnnModel, ModelWeights, evaluate, train_local
from ..transport import TcpServerEnd
from .fer import FerRecord, Usage, records_to_arrays, stratified_subset
from .report import ExperimentReport, MetricRow, confusion_matrix
from .synth import (
    TEST_PARTY,
    ClientData,
    MultimodalTaskConfig,
    derive_seed,
    gen_synthetic_physio,
    make_client_data,
    make_test_data,
    physio_feature_matrix,
)

log = logging.getLogger(__name__)

# Pooled training draws its rng streams as one extra party.
CENTRAL_PARTY = 10_000

# Pooled-baseline epoch budget (the timing table's centralized row).
CENTRAL_EPOCHS = 40

DEFAULT_TASK = MultimodalTaskConfig()


def default_augmenter(cfg: AugmentConfig | None = None):
    """Train-time flip/rotation augmenter for photographic inputs."""
    cfg = cfg if cfg is not None else AugmentConfig()

    def fn(batch, rng):
        return augment_batch(batch, rng, cfg)

    return fn


def task_for(run_cfg: RunConfig, task: MultimodalTaskConfig | None = None) -> MultimodalTaskConfig:
    """Overlay the run-config knobs (client count, sample rate) onto a task."""
    task = task if task is not None else DEFAULT_TASK
    return replace(
        task,
        n_clients=run_cfg.clients,
        physio=replace(task.physio, sample_rate_hz=run_cfg.sample_rate_hz),
    )


@dataclass
class DataBundle:
    """Per-client shards plus the shared held-out test set."""

    parts: list[ClientData]
    test: ClientData
    # flips and rotations suit photographs; the synthetic gratings carry
    # class identity in their orientation, so augmenting them relabels them
    augment: bool = False

    def __post_init__(self):
        if not self.parts:
            raise ValueError("need at least one client shard")


def synthetic_bundle(task: MultimodalTaskConfig) -> DataBundle:
    """Materialize the synthetic task for every client at once."""
    return DataBundle(
        parts=[make_client_data(task, cid) for cid in range(task.n_clients)],
        test=make_test_data(task),
    )


def fit_forest(run_cfg: RunConfig, features, labels, party: int) -> RandomForest:
    """Train the physio forest on one party's training split."""
    forest = RandomForest(run_cfg.forest())
    forest.fit(features, labels, seed=[run_cfg.seed, party, STREAM_FOREST])
    return forest


def evaluate_multimodal(
    model: CnnModel,
    weights: ModelWeights,
    forest: RandomForest,
    test: ClientData,
    policy: FusionPolicy,
) -> dict:
    """Score both modalities and their fusion on a held-out set.

    Returns the three 7x7 confusion matrices plus per-branch accuracies.
    """
    p_vis = model.predict_proba(weights, test.x)
    p_phys = forest.predict_proba(test.features)
    y_vis = p_vis.argmax(axis=1)
    y_phys = p_phys.argmax(axis=1)
    y_fused = fuse_batch(p_vis, p_phys, policy)
    mats = {
        "confusion_visual": confusion_matrix(test.y, y_vis),
        "confusion_physio": confusion_matrix(test.y, y_phys),
        "confusion_fused": confusion_matrix(test.y, y_fused),
    }
    n = len(test)
    for name, mat in list(mats.items()):
        mats[name.replace("confusion", "accuracy")] = float(np.trace(mat)) / n
    return mats


def _epoch_loop(run_cfg, x, y, x_val, y_val, epochs, party, augment):
    """Shared single-party training loop with per-epoch validation rows."""
    model = CnnModel()
    weights = model.init_weights(run_cfg.seed)
    adam = Adam(run_cfg.adam())
    rng = np.random.default_rng([run_cfg.seed, party, STREAM_TRAIN])
    augment_fn = default_augmenter() if augment else None
    rows = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        train_local(
            model,
            weights,
            x,
            y,
            epochs=1,
            batch_size=32,
            adam=adam,
            rng=rng,
            epochs_done=epoch,
            augment_fn=augment_fn,
        )
        loss, acc = evaluate(model, weights, x_val, y_val)
        rows.append(MetricRow(index=epoch, loss=loss, accuracy=acc, wall_s=time.perf_counter() - t0))
        log.info("%s epoch %d: val loss %.4f, val acc %.4f", party, epoch, loss, acc)
    return model, weights, rows


def _single_party_report(run_cfg, test, data, party, epochs, mode, augment) -> ExperimentReport:
    t_start = time.perf_counter()
    tr, va = split_local(len(data), [run_cfg.seed, party, STREAM_SPLIT])
    if not va.size:
        va = tr
    model, weights, rows = _epoch_loop(
        run_cfg, data.x[tr], data.y[tr], data.x[va], data.y[va], epochs, party, augment
    )
    forest = fit_forest(run_cfg, data.features[tr], data.y[tr], party)
    mats = evaluate_multimodal(model, weights, forest, test, run_cfg.fusion_mode)
    return ExperimentReport(
        mode=mode,
        wall_clock_s=time.perf_counter() - t_start,
        metric_rows=rows,
        confusion_physio=mats["confusion_physio"],
        confusion_visual=mats["confusion_visual"],
        confusion_fused=mats["confusion_fused"],
        n_clients=1,
        epochs=epochs,
        extras={"forest_oob": forest.oob_score},
    )


def run_individual(
    run_cfg: RunConfig,
    task: MultimodalTaskConfig | None = None,
    *,
    client_id: int = 0,
    epochs: int | None = None,
    data: DataBundle | None = None,
) -> ExperimentReport:
    """One client trains alone on its own shard; no communication at all.

    Defaults to one federated round's worth of epochs (the local_epochs
    setting), which is the budget this mode gets in the timing comparison.
    """
    task = task_for(run_cfg, task)
    if data is not None:
        shard, test, augment = data.parts[client_id], data.test, data.augment
    else:
        shard, test, augment = make_client_data(task, client_id), make_test_data(task), False
    epochs = epochs if epochs is not None else run_cfg.local_epochs
    return _single_party_report(run_cfg, test, shard, client_id, epochs, "individual", augment)


def run_centralized(
    run_cfg: RunConfig,
    task: MultimodalTaskConfig | None = None,
    *,
    epochs: int | None = None,
    data: DataBundle | None = None,
) -> ExperimentReport:
    """Every shard pooled on one machine; the no-privacy upper baseline."""
    task = task_for(run_cfg, task)
    bundle = data if data is not None else synthetic_bundle(task)
    pooled = ClientData(
        x=np.concatenate([p.x for p in bundle.parts]),
        features=np.concatenate([p.features for p in bundle.parts]),
        y=np.concatenate([p.y for p in bundle.parts]),
    )
    epochs = epochs if epochs is not None else CENTRAL_EPOCHS
    report = _single_party_report(
        run_cfg, bundle.test, pooled, CENTRAL_PARTY, epochs, "centralized", bundle.augment
    )
    report.extras["n_pooled"] = len(pooled)
    return report


def run_federated(
    run_cfg: RunConfig,
    task: MultimodalTaskConfig | None = None,
    *,
    transport: str = "loopback",
    workdir=None,
    data: DataBundle | None = None,
) -> ExperimentReport:
    """The full protocol: per-round local training plus weight averaging.

    ``transport="loopback"`` keeps every client in this process (threads,
    in-memory queues); ``transport="socket"`` spawns one subprocess per
    client and talks TCP on an ephemeral local port, which is the
    deployment-shaped path and the one whose client memory is worth
    measuring. Physio forests never leave their client; evaluation uses
    client 0's.
    """
    task = task_for(run_cfg, task)
    bundle = data if data is not None else synthetic_bundle(task)
    parts, test = bundle.parts, bundle.test
    if len(parts) != run_cfg.clients:
        raise ValueError(f"config expects {run_cfg.clients} clients, bundle has {len(parts)}")
    datasets = [LocalDataset(x=p.x, y=p.y) for p in parts]

    t_start = time.perf_counter()
    if transport == "loopback":
        history = run_federation(
            run_cfg.federation(),
            datasets,
            adam_config=run_cfg.adam(),
            augment_fn=default_augmenter() if bundle.augment else None,
        )
    elif transport == "socket":
        history = _socket_federation(run_cfg, datasets, workdir, augment=bundle.augment)
    else:
        raise ValueError(f"unknown transport {transport!r}; expected loopback or socket")
    wall = time.perf_counter() - t_start

    model = CnnModel()
    weights = history.final_weights.astype(model.config.dtype)
    tr0, _ = split_local(len(parts[0]), [run_cfg.seed, 0, STREAM_SPLIT])
    forest = fit_forest(run_cfg, parts[0].features[tr0], parts[0].y[tr0], 0)
    mats = evaluate_multimodal(model, weights, forest, test, run_cfg.fusion_mode)

    rows = [MetricRow(index=r.round, loss=r.loss, accuracy=r.accuracy, wall_s=r.wall_s)
            for r in history.records]
    rss = [r.peak_rss_mb for r in history.records if not np.isnan(r.peak_rss_mb)]
    return ExperimentReport(
        mode="federated",
        wall_clock_s=wall,
        metric_rows=rows,
        confusion_physio=mats["confusion_physio"],
        confusion_visual=mats["confusion_visual"],
        confusion_fused=mats["confusion_fused"],
        n_clients=len(parts),
        rounds=run_cfg.rounds,
        local_epochs=run_cfg.local_epochs,
        peak_rss_mb=max(rss) if rss else float("nan"),
        extras={"transport": transport, "forest_oob": forest.oob_score},
    )


def write_client_dir(root: Path, client_id: int, dataset: LocalDataset) -> Path:
    """Lay out one client's working directory for the subprocess CLI."""
    cdir = Path(root) / f"client{client_id}"
    cdir.mkdir(parents=True, exist_ok=True)
    np.savez(cdir / "data.npz", x=dataset.x, y=dataset.y)
    return cdir


# Desk-scale FER subset sizes (100 * 7 train, 20 * 7 test).
FER_TRAIN_PER_CLASS = 100
FER_TEST_PER_CLASS = 20
_FER_DRAW_TRAIN = 21
_FER_DRAW_TEST = 22
_FER_PHYS_STREAM = 23


def _class_major(records: list[FerRecord]) -> list[FerRecord]:
    return sorted(records, key=lambda r: int(r.label))


def _partition_round_robin(records: list[FerRecord], n_clients: int) -> list[list[FerRecord]]:
    """Deal each class's records across clients so shards stay balanced."""
    buckets: list[list[FerRecord]] = [[] for _ in range(n_clients)]
    seen = [0] * N_CLASSES
    for r in records:
        k = int(r.label)
        buckets[seen[k] % n_clients].append(r)
        seen[k] += 1
    return buckets


def _paired_physio(task: MultimodalTaskConfig, party: int, y: np.ndarray) -> np.ndarray:
    """Synthesize class-aligned physio features for one party's label list.

    ``y`` must be class-major. The generator emits equal-sized classes, so
    it runs at the largest per-class count and each class keeps its first
    ``n_k`` windows.
    """
    counts = np.bincount(y, minlength=N_CLASSES)
    cfg = replace(
        task.physio,
        windows_per_class=int(counts.max()),
        seed=derive_seed(task.seed, party, _FER_PHYS_STREAM),
    )
    feats, fy = physio_feature_matrix(gen_synthetic_physio(cfg))
    rows = [feats[fy == k][: counts[k]] for k in range(N_CLASSES)]
    return np.concatenate(rows)


def _fer_party(task: MultimodalTaskConfig, party: int, records: list[FerRecord]) -> ClientData:
    if not records:
        raise ValueError(f"party {party} received no records")
    x, y = records_to_arrays(records)
    return ClientData(x=x, features=_paired_physio(task, party, y), y=y)


def fer_data_bundle(
    records: list[FerRecord],
    run_cfg: RunConfig,
    task: MultimodalTaskConfig | None = None,
    *,
    full: bool = False,
) -> DataBundle:
    """Pair facial-expression images with synthetic physio windows.

    The recordings the fused task really wants are not part of the public
    dataset, so each party gets label-matched synthetic windows instead;
    the pairing is class-consistent even though the streams are
    independent. Training rows come from the Training split, held-out rows
    from PublicTest. Default is a desk-scale stratified subset; ``full``
    uses every row and carries no accuracy promise.
    """
    task = task_for(run_cfg, task)
    if full:
        train = _class_major([r for r in records if r.usage is Usage.TRAINING])
        test = _class_major([r for r in records if r.usage is Usage.PUBLIC_TEST])
    else:
        train = stratified_subset(
            records, Usage.TRAINING, FER_TRAIN_PER_CLASS,
            derive_seed(run_cfg.seed, _FER_DRAW_TRAIN),
        )
        test = stratified_subset(
            records, Usage.PUBLIC_TEST, FER_TEST_PER_CLASS,
            derive_seed(run_cfg.seed, _FER_DRAW_TEST),
        )
    shards = _partition_round_robin(train, run_cfg.clients)
    return DataBundle(
        parts=[_fer_party(task, cid, shard) for cid, shard in enumerate(shards)],
        test=_fer_party(task, TEST_PARTY, test),
        augment=True,
    )


def _socket_federation(run_cfg, datasets, workdir, *, augment=False) -> FederationHistory:
    """Server in this process, one spawned CLI client per dataset."""
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="fedrun-")
        workdir = tmp.name
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        cfg_path = workdir / "run.cfg"
        cfg_path.write_text(format_config(run_cfg))
        fed_cfg = run_cfg.federation()
        end = TcpServerEnd("127.0.0.1", 0, fed_cfg.n_clients,
                           accept_timeout=fed_cfg.straggler_timeout)
        procs = []
        try:
            for cid, ds in enumerate(datasets):
                cdir = write_client_dir(workdir, cid, ds)
                cmd = [
                    sys.executable, "-m", "fedfuse.cli", "client",
                    "--config", str(cfg_path),
                    "--server", f"127.0.0.1:{end.port}",
                    "--client-id", str(cid),
                    "--data", str(cdir),
                ]
                if augment:
                    cmd.append("--augment")
                procs.append(subprocess.Popen(cmd))
            history = FederationServer(fed_cfg, end).run()
        except BaseException:
            for p in procs:
                p.kill()
            raise
        for p in procs:
            if p.wait(timeout=60) != 0:
                raise RuntimeError(f"client subprocess exited with {p.returncode}")
        return history
    finally:
        if tmp is not None:
            tmp.cleanup()
