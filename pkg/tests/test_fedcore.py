"""Aggregation arithmetic, the local split, and the round state machine."""

import math
import threading

import numpy as np
import pytest

from fedfuse import transport
from fedfuse.fedcore import (
    STREAM_SPLIT,
    STREAM_TRAIN,
    ClientRunner,
    ClientTrainer,
    ClientUpdate,
    EmptyDataset,
    EmptyUpdateSet,
    FederationConfig,
    FederationServer,
    LocalDataset,
    MixedRounds,
    NoUpdatesReceived,
    ShapeMismatch,
    UpdateMetrics,
    decode_update,
    encode_update,
    fedavg,
    run_federation,
    split_local,
)
from fedfuse.nn import Adam, CnnModel, ModelWeights, train_local
from fedfuse.transport import Kind, Message


def random_weights(rng, scale=1.0):
    return ModelWeights(
        {
            "w": (scale * rng.standard_normal((3, 4))).astype(np.float32),
            "b": (scale * rng.standard_normal(4)).astype(np.float32),
        }
    )


def update(client_id, weights, count, round=0):
    return ClientUpdate(
        client_id=client_id,
        round=round,
        weights=weights,
        sample_count=count,
        metrics=UpdateMetrics(loss=0.0, accuracy=0.0),
    )


class TestFedavg:
    def test_matches_scalar_oracle(self, rng):
        # oracle: plain python loops over gcd-reduced counts, no numpy math
        for _ in range(20):
            k = int(rng.integers(1, 6))
            ups = [
                update(i, random_weights(rng), int(rng.integers(1, 500)))
                for i in range(k)
            ]
            merged = fedavg(ups)

            g = 0
            for u in ups:
                g = math.gcd(g, u.sample_count)
            counts = [u.sample_count // g for u in ups]
            total = float(sum(counts))
            for name in ups[0].weights.names():
                flat = merged[name].ravel()
                for j in range(flat.size):
                    acc = 0.0
                    for m, u in zip(counts, ups):
                        acc += m * float(u.weights[name].ravel()[j])
                    want = acc / total
                    assert abs(flat[j] - want) <= 1e-12 * max(1.0, abs(want))

    def test_two_client_weighted_mean_exact(self, rng):
        a, b = random_weights(rng), random_weights(rng)
        merged = fedavg([update(0, a, 1), update(1, b, 3)])
        for name in a.names():
            want = (a[name].astype(np.float64) + 3.0 * b[name].astype(np.float64)) / 4.0
            np.testing.assert_array_equal(merged[name], want)

    def test_permutation_invariant(self, rng):
        ups = [update(i, random_weights(rng), 10 + i) for i in range(4)]
        merged = fedavg(ups)
        shuffled = fedavg([ups[2], ups[0], ups[3], ups[1]])
        for name in merged.names():
            assert merged[name].tobytes() == shuffled[name].tobytes()

    def test_common_count_scaling_is_identity(self, rng):
        ups = [update(i, random_weights(rng), c) for i, c in enumerate((3, 5, 9))]
        scaled = [
            update(u.client_id, u.weights, u.sample_count * 7) for u in ups
        ]
        a, b = fedavg(ups), fedavg(scaled)
        for name in a.names():
            assert a[name].tobytes() == b[name].tobytes()

    def test_result_in_convex_hull(self, rng):
        ups = [update(i, random_weights(rng, scale=3.0), int(rng.integers(1, 40))) for i in range(5)]
        merged = fedavg(ups)
        for name in merged.names():
            stack = np.stack([u.weights[name].astype(np.float64) for u in ups])
            assert np.all(merged[name] >= stack.min(axis=0) - 1e-12)
            assert np.all(merged[name] <= stack.max(axis=0) + 1e-12)

    def test_output_is_float64(self, rng):
        merged = fedavg([update(0, random_weights(rng), 2)])
        assert all(merged[n].dtype == np.float64 for n in merged.names())

    def test_empty_rejected(self):
        with pytest.raises(EmptyUpdateSet):
            fedavg([])

    def test_mixed_rounds_rejected(self, rng):
        with pytest.raises(MixedRounds):
            fedavg([update(0, random_weights(rng), 1, round=0),
                    update(1, random_weights(rng), 1, round=1)])

    def test_shape_mismatch_rejected(self, rng):
        a = random_weights(rng)
        b = ModelWeights({"w": np.zeros((2, 2), np.float32), "b": np.zeros(4, np.float32)})
        with pytest.raises(ShapeMismatch):
            fedavg([update(0, a, 1), update(1, b, 1)])

    def test_name_mismatch_rejected(self, rng):
        a = random_weights(rng)
        b = ModelWeights({"w2": a["w"].copy(), "b": a["b"].copy()})
        with pytest.raises(ShapeMismatch):
            fedavg([update(0, a, 1), update(1, b, 1)])


class TestSplitLocal:
    def test_partition_of_range(self):
        tr, va = split_local(20, [0, 1, STREAM_SPLIT])
        assert va.size == 2
        both = np.concatenate([tr, va])
        assert sorted(both.tolist()) == list(range(20))
        assert np.array_equal(tr, np.sort(tr))
        assert np.array_equal(va, np.sort(va))

    def test_ten_percent_rounded(self):
        assert split_local(14, 0)[1].size == 1
        assert split_local(15, 0)[1].size == 2
        assert split_local(9, 0)[1].size == 1

    def test_single_sample_keeps_training_data(self):
        tr, va = split_local(1, 0)
        assert tr.tolist() == [0]
        assert va.size == 0

    def test_deterministic_per_seed(self):
        a = split_local(30, [7, 2, STREAM_SPLIT])
        b = split_local(30, [7, 2, STREAM_SPLIT])
        c = split_local(30, [7, 3, STREAM_SPLIT])
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])


class TestUpdateCodec:
    def test_round_trip(self, rng):
        u = ClientUpdate(
            client_id=2,
            round=5,
            weights=random_weights(rng),
            sample_count=17,
            metrics=UpdateMetrics(loss=0.25, accuracy=0.75, peak_rss_mb=93.5),
        )
        msg = Message(Kind.UPDATE, 5, 2, encode_update(u))
        back = decode_update(msg)
        assert back.client_id == 2 and back.round == 5 and back.sample_count == 17
        assert back.metrics.loss == 0.25 and back.metrics.accuracy == 0.75
        assert back.metrics.peak_rss_mb == 93.5
        assert back.weights.equal(u.weights)

    def test_nan_rss_survives(self, rng):
        u = update(0, random_weights(rng), 3)
        back = decode_update(Message(Kind.UPDATE, 0, 0, encode_update(u)))
        assert math.isnan(back.metrics.peak_rss_mb)

    def test_short_payload_rejected(self):
        with pytest.raises(transport.Truncated):
            decode_update(Message(Kind.UPDATE, 0, 0, b"\x00" * 10))

    def test_sample_count_must_be_positive(self, rng):
        with pytest.raises(ValueError):
            update(0, random_weights(rng), 0)


class TestConfig:
    def test_defaults(self):
        cfg = FederationConfig()
        assert cfg.n_clients == 3 and cfg.rounds == 20 and cfg.local_epochs == 4
        assert cfg.straggler_timeout == 120.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_clients": 0},
            {"rounds": 0},
            {"local_epochs": 0},
            {"straggler_timeout": 0.0},
            {"straggler_timeout": -1.0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            FederationConfig(**kwargs)


class TestLocalDataset:
    def test_empty_rejected(self):
        with pytest.raises(EmptyDataset):
            LocalDataset(np.zeros((0, 8, 8)), np.zeros(0))

    def test_label_shape_checked(self):
        with pytest.raises(ValueError):
            LocalDataset(np.zeros((3, 8, 8)), np.zeros(4))


def tiny_dataset(rng, n=12):
    x = rng.random((n, 8, 8), dtype=np.float64).astype(np.float32)
    y = rng.integers(0, 7, size=n)
    return LocalDataset(x, y)


class TestSingleClientDegeneracy:
    def test_federation_equals_plain_training_bitwise(self, reduced_config, rng):
        # R rounds of E local epochs through the full loopback stack must
        # reproduce R*E epochs of direct training exactly: same split, same
        # minibatch stream, optimizer state and lr decay carried across
        # round boundaries.
        data = tiny_dataset(rng)
        cfg = FederationConfig(n_clients=1, rounds=2, local_epochs=2, seed=11)
        history = run_federation(cfg, [data], model_config=reduced_config)
        assert history.rounds_run == 2

        model = CnnModel(reduced_config)
        weights = model.init_weights(cfg.seed)
        tr, _ = split_local(len(data), [cfg.seed, 0, STREAM_SPLIT])
        train_local(
            model,
            weights,
            data.x[tr],
            data.y[tr],
            epochs=4,
            batch_size=32,
            adam=Adam(),
            rng=np.random.default_rng([cfg.seed, 0, STREAM_TRAIN]),
        )
        assert history.final_weights.equal(weights)

    def test_step_owned_matches_defensive_copy(self, reduced_config, rng):
        data = tiny_dataset(rng)
        cfg = FederationConfig(n_clients=1, rounds=1, local_epochs=1, seed=3)
        model = CnnModel(reduced_config)
        start = model.init_weights(cfg.seed)

        shared = start.copy()
        t1 = ClientTrainer(0, data, cfg, model=CnnModel(reduced_config))
        u1 = t1.step(shared, 0)
        # the default path may not touch the caller's arrays
        assert shared.equal(start)

        t2 = ClientTrainer(0, data, cfg, model=CnnModel(reduced_config))
        u2 = t2.step(start.copy(), 0, owned=True)
        assert u2.weights.equal(u1.weights)


class TestLoopbackFederation:
    def test_two_clients_deterministic(self, reduced_config, rng):
        datasets = [tiny_dataset(rng), tiny_dataset(rng, n=9)]
        cfg = FederationConfig(n_clients=2, rounds=2, local_epochs=1, seed=5)
        h1 = run_federation(cfg, datasets, model_config=reduced_config)
        h2 = run_federation(cfg, datasets, model_config=reduced_config)
        assert h1.final_weights.equal(h2.final_weights)
        assert [r.received for r in h1.records] == [(0, 1), (0, 1)]
        for name in h1.final_weights.names():
            assert np.all(np.isfinite(h1.final_weights[name]))

    def test_dataset_count_checked(self, reduced_config, rng):
        cfg = FederationConfig(n_clients=2, rounds=1)
        with pytest.raises(ValueError):
            run_federation(cfg, [tiny_dataset(rng)], model_config=reduced_config)


class ScriptedEnd:
    """Server endpoint driven by a script: each broadcast may enqueue
    replies, each recv pops the queue or times out."""

    def __init__(self, on_broadcast):
        self.queue = []
        self.sent = []
        self.broadcasts = 0
        self.on_broadcast = on_broadcast
        self.closed = False

    def accept_all(self):
        pass

    def send(self, client_id, msg):
        self.sent.append((client_id, msg))

    def broadcast(self, make_msg):
        self.broadcasts += 1
        self.on_broadcast(self, make_msg)

    def recv(self, timeout=None):
        if self.queue:
            return self.queue.pop(0)
        raise TimeoutError("script exhausted")

    def close(self):
        self.closed = True


def scripted_update(weights, round, client_id, count=5, shift=1.0):
    shifted = ModelWeights(
        {n: weights[n].astype(np.float32) + np.float32(shift) for n in weights.names()}
    )
    u = ClientUpdate(
        client_id=client_id,
        round=round,
        weights=shifted,
        sample_count=count,
        metrics=UpdateMetrics(loss=1.0, accuracy=0.5),
    )
    return Message(Kind.UPDATE, round, client_id, encode_update(u))


class TestServerStateMachine:
    def make_server(self, reduced_config, on_broadcast, **cfg_kwargs):
        cfg = FederationConfig(straggler_timeout=0.2, **cfg_kwargs)
        end = ScriptedEnd(on_broadcast)
        for cid in range(cfg.n_clients):
            end.queue.append(Message(Kind.HELLO, 0, cid))
        server = FederationServer(cfg, end, model=CnnModel(reduced_config))
        return server, end

    def test_straggler_renormalizes_to_reporters(self, reduced_config):
        # client 1 never reports; the round must close on client 0 alone and
        # adopt its weights outright (weighted mean over one reporter)
        def on_broadcast(end, make_msg):
            msg = make_msg(0)
            if msg.kind is Kind.GLOBAL_MODEL:
                weights = transport.deserialize_weights(msg.payload)
                end.queue.append(scripted_update(weights, msg.round, 0))

        server, end = self.make_server(
            reduced_config, on_broadcast, n_clients=2, rounds=1
        )
        history = server.run()
        assert history.records[0].received == (0,)
        start = CnnModel(reduced_config).init_weights(0)
        for name in start.names():
            np.testing.assert_array_equal(
                history.final_weights[name], start[name] + np.float32(1.0)
            )
        assert end.closed

    def test_stale_and_duplicate_updates_dropped(self, reduced_config):
        def on_broadcast(end, make_msg):
            msg = make_msg(0)
            if msg.kind is Kind.GLOBAL_MODEL:
                weights = transport.deserialize_weights(msg.payload)
                end.queue.append(scripted_update(weights, 99, 0))
                end.queue.append(scripted_update(weights, msg.round, 7))
                end.queue.append(scripted_update(weights, msg.round, 0, shift=2.0))
                end.queue.append(scripted_update(weights, msg.round, 0, shift=-9.0))
                end.queue.append(scripted_update(weights, msg.round, 1, shift=2.0))

        server, end = self.make_server(
            reduced_config, on_broadcast, n_clients=2, rounds=1
        )
        history = server.run()
        # stale round 99 and unknown client 7 ignored; the second update
        # from client 0 dropped as a duplicate
        assert history.records[0].received == (0, 1)
        start = CnnModel(reduced_config).init_weights(0)
        for name in start.names():
            np.testing.assert_array_equal(
                history.final_weights[name], start[name] + np.float32(2.0)
            )

    def test_empty_round_retries_then_fails(self, reduced_config):
        server, end = self.make_server(
            reduced_config, lambda end, make_msg: None, n_clients=1, rounds=1
        )
        with pytest.raises(NoUpdatesReceived):
            server.run()
        # one broadcast for the first attempt, one for the retry
        assert end.broadcasts == 2
        assert end.closed

    def test_handshake_timeout(self, reduced_config):
        cfg = FederationConfig(n_clients=1, rounds=1, straggler_timeout=0.2)
        end = ScriptedEnd(lambda e, m: None)
        server = FederationServer(cfg, end, model=CnnModel(reduced_config))
        with pytest.raises(TimeoutError):
            server.run()

    def test_handshake_welcomes_each_client(self, reduced_config):
        def on_broadcast(end, make_msg):
            for cid in (0, 1):
                msg = make_msg(cid)
                if msg.kind is Kind.GLOBAL_MODEL:
                    weights = transport.deserialize_weights(msg.payload)
                    end.queue.append(scripted_update(weights, msg.round, cid))

        server, end = self.make_server(
            reduced_config, on_broadcast, n_clients=2, rounds=1
        )
        server.run()
        welcomes = [(cid, m) for cid, m in end.sent if m.kind is Kind.WELCOME]
        assert sorted(cid for cid, _ in welcomes) == [0, 1]


class TestCrossTransport:
    def test_tcp_matches_loopback_bitwise(self, reduced_config, rng):
        datasets = [tiny_dataset(rng), tiny_dataset(rng, n=10)]
        cfg = FederationConfig(n_clients=2, rounds=2, local_epochs=1, seed=3)
        loop = run_federation(cfg, datasets, model_config=reduced_config)

        server_end = transport.TcpServerEnd("127.0.0.1", 0, expected_clients=2)
        errors = []

        def run_client(cid):
            try:
                trainer = ClientTrainer(
                    cid, datasets[cid], cfg, model=CnnModel(reduced_config)
                )
                end = transport.TcpClientEnd("127.0.0.1", server_end.port, cid)
                ClientRunner(end, trainer).run(timeout=30.0)
            except transport.ChannelClosed:
                pass
            except BaseException as exc:  # surface in the main thread
                errors.append(exc)

        threads = [
            threading.Thread(target=run_client, args=(cid,), daemon=True)
            for cid in range(2)
        ]
        for t in threads:
            t.start()
        server = FederationServer(cfg, server_end, model=CnnModel(reduced_config))
        tcp = server.run()
        for t in threads:
            t.join(timeout=30)
        assert not errors
        assert tcp.final_weights.equal(loop.final_weights)
        assert [r.received for r in tcp.records] == [(0, 1), (0, 1)]
