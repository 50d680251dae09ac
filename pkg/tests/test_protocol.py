import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient, random_batch, rel_err, small_config
from mmofl.datagen import (
    ClientStream,
    MultimodalDataset,
    RoundBatch,
    build_schedule,
    empty_schedule,
)
from mmofl.experiment import run_experiment
from mmofl.model import ZERO_FILLED, ModelConfig, ModelParams, backward, init_params, sgd_step
from mmofl.pmm import PrototypeMatrix, TemporalPrototypes, update_persistent
from mmofl.protocol import (
    Client,
    ServerState,
    Strategy,
    TrainConfig,
    local_update_full,
    local_update_partial,
    local_update_pmm,
    local_update_zerofill,
    run_round,
)


def same_rows(a, b):
    """Row equality that treats NaN cells (regret disabled) as equal."""
    return [{k: repr(v) for k, v in r.items()} for r in a] == [{k: repr(v) for k, v in r.items()} for r in b]


def drop(batch, m):
    data = tuple(None if i == m else x for i, x in enumerate(batch.data))
    return RoundBatch(data, batch.labels, tuple(x is not None for x in data), batch.client_id, batch.round_index)


@pytest.fixture
def setup(rng):
    cfg = ModelConfig(2, (4, 3), 3, 3, "linear", "mlp1", hidden_dim=5)
    return cfg, init_params(cfg, 0), random_batch(rng, cfg, 10)


class TestStrategyConfig:
    @pytest.mark.parametrize("text,want", [("fm", Strategy.FM), ("PM", Strategy.PM), ("zf", Strategy.ZF), ("pmm", Strategy.PMM)])
    def test_parse(self, text, want):
        assert Strategy.parse(text) is want

    def test_parse_unknown(self):
        with pytest.raises(ValueError):
            Strategy.parse("XYZ")

    @pytest.mark.parametrize("kw", [{"local_iters": 0}, {"decay": 0.0}, {"decay": 1.5}, {"eta_floor": 0.0}])
    def test_invalid_train(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_eta_reaches_floor_at_90(self):
        tc = TrainConfig(eta0=0.1, decay=0.95, eta_floor=0.001)
        assert math.ceil(math.log(0.01) / math.log(0.95)) == 90
        assert tc.eta(89) > 0.001 and tc.eta(90) == 0.001
        assert tc.eta(0) == 0.1

    def test_mvsa_style_accepted(self):
        tc = TrainConfig(eta0=0.01, decay=0.99, eta_floor=0.001)
        assert tc.eta(1000) == 0.001

    @settings(max_examples=50, deadline=None)
    @given(eta0=st.floats(1e-3, 1.0), decay=st.floats(0.5, 1.0), floor=st.floats(1e-5, 1e-3), t=st.integers(0, 500))
    def test_eta_monotone_and_floored(self, eta0, decay, floor, t):
        tc = TrainConfig(eta0=eta0, decay=decay, eta_floor=floor)
        assert tc.eta(t + 1) <= tc.eta(t) and tc.eta(t) >= floor


class TestLocalUpdates:
    def test_full_one_step(self, setup):
        cfg, p, b = setup
        ref = sgd_step(p, backward(p, b), 0.1)
        assert local_update_full(p, b, 1, 0.1).bit_identical(ref)

    def test_full_three_chained(self, setup):
        cfg, p, b = setup
        ref = p
        for _ in range(3):
            ref = sgd_step(ref, backward(ref, b), 0.05)
        assert local_update_full(p, b, 3, 0.05).bit_identical(ref)

    def test_full_rejects_partial(self, setup):
        _, p, b = setup
        with pytest.raises(ValueError):
            local_update_full(p, drop(b, 0), 1, 0.1)

    def test_stationary_point(self):
        # identity encoders, zero head, class-balanced batch with mirrored inputs: zero gradient
        cfg = ModelConfig(1, (1,), 1, 2, "identity", "linear")
        p = ModelParams(cfg, (np.zeros(4), np.zeros(0)))
        b = RoundBatch((np.array([[1.0], [-1.0], [1.0], [-1.0]]),), np.array([0, 0, 1, 1]), (True,))
        for E in (1, 4):
            assert local_update_full(p, b, E, 0.5).bit_identical(p)

    @pytest.mark.parametrize("fn", [local_update_partial, local_update_zerofill])
    def test_no_missing_equals_full(self, setup, fn):
        _, p, b = setup
        assert fn(p, b, 2, 0.1).bit_identical(local_update_full(p, b, 2, 0.1))

    def test_pmm_no_missing_equals_full(self, setup):
        cfg, p, b = setup
        protos = PrototypeMatrix.empty(2, 3, 3)
        assert local_update_pmm(p, b, 2, 0.1, protos).bit_identical(local_update_full(p, b, 2, 0.1))

    def test_partial_freezes_missing_block(self, setup):
        _, p, b = setup
        out = local_update_partial(p, drop(b, 1), 2, 0.3)
        assert out.blocks[2].tobytes() == p.blocks[2].tobytes()
        assert out.blocks[0].tobytes() != p.blocks[0].tobytes()

    def test_partial_step_matches_fd(self, setup):
        cfg, p, b = setup
        pb = drop(b, 1)
        eta = 0.1
        out = local_update_partial(p, pb, 1, eta)
        step = (p.flat() - out.flat()) / eta
        fd = ModelParams.from_flat(cfg, fd_gradient(p, pb, {1: (np.zeros((len(pb), 3)), ZERO_FILLED)}))
        got = ModelParams.from_flat(cfg, step)
        for i in (0, 1):
            assert rel_err(got.blocks[i], fd.blocks[i]) < 1e-5

    def test_zerofill_updates_bias_not_weights(self):
        cfg = ModelConfig(2, (3, 3), 2, 2, "linear", "linear")
        p = init_params(cfg, 1)
        enc = p.blocks[2].copy()
        enc[6:] = 0.0
        p = ModelParams(cfg, (p.blocks[0], p.blocks[1], enc))
        b = drop(random_batch(np.random.default_rng(0), cfg, 12), 1)
        out = local_update_zerofill(p, b, 1, 0.5)
        assert np.array_equal(out.blocks[2][:6], p.blocks[2][:6])
        assert np.any(out.blocks[2][6:] != 0.0)

    def test_zerofill_identity_matches_partial(self):
        cfg = ModelConfig(2, (3, 3), 3, 2, "identity", "mlp1", hidden_dim=4)
        p = init_params(cfg, 2)
        b = drop(random_batch(np.random.default_rng(0), cfg, 12), 0)
        assert local_update_zerofill(p, b, 2, 0.2).bit_identical(local_update_partial(p, b, 2, 0.2))

    def test_pmm_zero_prototypes_equals_partial(self, setup):
        _, p, b = setup
        pb = drop(b, 0)
        protos = PrototypeMatrix.empty(2, 3, 3)
        assert local_update_pmm(p, pb, 2, 0.1, protos).bit_identical(local_update_partial(p, pb, 2, 0.1))

    def test_pmm_without_fallback_raises(self, setup):
        _, p, b = setup
        with pytest.raises(KeyError):
            local_update_pmm(p, drop(b, 0), 1, 0.1, PrototypeMatrix.empty(2, 3, 3), fallback=False)

    def test_pmm_hand_head_gradient(self):
        # d=1 identity encoders, 2 classes; modality 1 missing and replaced by prototypes 0.5 / -2
        cfg = ModelConfig(2, (1, 1), 1, 2, "identity", "linear")
        W = np.array([[0.3, -0.2], [0.1, 0.4]])
        bias = np.array([0.05, -0.05])
        p = ModelParams(cfg, (np.concatenate([W.ravel(), bias]), np.zeros(0), np.zeros(0)))
        protos = update_persistent(
            PrototypeMatrix.empty(2, 2, 1, normalize=False),
            TemporalPrototypes(np.array([[[0.0], [0.0]], [[0.5], [-2.0]]]), np.array([[False, False], [True, True]])),
            0,
        )
        x = np.array([1.0, -1.5, 2.0])
        y = np.array([0, 1, 1])
        b = RoundBatch((x[:, None], None), y, (True, False))
        sub = np.where(y == 0, 0.5, -2.0)
        gW = np.zeros((2, 2))
        gb = np.zeros(2)
        for xi, si, yi in zip(x, sub, y):
            z = np.array([xi, si])
            logits = z @ W + bias
            pr = np.exp(logits - logits.max())
            pr /= pr.sum()
            pr[yi] -= 1.0
            gW += np.outer(z, pr) / 3
            gb += pr / 3
        out = local_update_pmm(p, b, 1, 1.0, protos)
        (W2, b2), = out.layers(0)
        assert np.max(np.abs(W - W2 - gW)) < 1e-12
        assert np.max(np.abs(bias - b2 - gb)) < 1e-12


def _clients(pools, window=6, churn=2):
    return [Client(k, ClientStream(np.asarray(p), window, churn)) for k, p in enumerate(pools)]


def _dataset(rng, cfg, n=40):
    return MultimodalDataset(
        tuple(rng.standard_normal((n, d)) for d in cfg.input_dims), rng.integers(0, cfg.num_classes, n), cfg.num_classes
    )


class TestRunRound:
    def _cfg(self):
        return ModelConfig(2, (3, 3), 3, 3, "identity", "linear")

    def test_single_client_equals_local(self, rng):
        cfg = self._cfg()
        ds = _dataset(rng, cfg)
        clients = _clients([np.arange(20)])
        p = init_params(cfg, 0)
        train = TrainConfig(rounds=1, strategy=Strategy.FM)
        server, out = run_round(ServerState.initial(p, False), clients, ds, empty_schedule(1, 2, 1), train)
        ref = local_update_full(p, clients[0].batch(ds, 0), 1, train.eta(0))
        assert server.params.bit_identical(ref) and server.round == 1

    def test_identical_clients(self, rng):
        cfg = ModelConfig(2, (3, 3), 4, 3, "mlp1", "mlp1", hidden_dim=3)
        ds = _dataset(rng, cfg)
        clients = _clients([np.arange(20)] * 5)
        p = init_params(cfg, 0)
        train = TrainConfig(rounds=1, local_iters=2, strategy=Strategy.FM)
        server, _ = run_round(ServerState.initial(p, False), clients, ds, empty_schedule(1, 2, 5), train)
        assert server.params.bit_identical(local_update_full(p, clients[0].batch(ds, 0), 2, 0.1))

    def test_aggregate_matches_mean_gradient(self, rng):
        cfg = self._cfg()
        ds = _dataset(rng, cfg, 60)
        K = 4
        clients = _clients([rng.permutation(60)[:20] for _ in range(K)])
        p = init_params(cfg, 3)
        train = TrainConfig(rounds=1, eta0=0.2, strategy=Strategy.FM)
        server, _ = run_round(ServerState.initial(p, False), clients, ds, empty_schedule(1, 2, K), train)
        grads = [backward(p, c.batch(ds, 0)).flat() for c in clients]
        ref = p.flat() - 0.2 / K * np.sum(grads, axis=0)
        assert np.max(np.abs(server.params.flat() - ref)) < 1e-12

    def test_fm_rejects_missing(self, rng):
        cfg = self._cfg()
        ds = _dataset(rng, cfg)
        sched = build_schedule(2, 1.0, 2, 1, seed=0)
        with pytest.raises(ValueError):
            run_round(ServerState.initial(init_params(cfg, 0), False), _clients([np.arange(20)]), ds, sched, TrainConfig(strategy=Strategy.FM))

    def test_client_failure_aborts(self, rng):
        cfg = self._cfg()
        ds = _dataset(rng, cfg)
        ds.data[0][3, 0] = np.nan
        clients = _clients([np.arange(10, 30), np.arange(0, 20)])
        with pytest.raises(ValueError):
            run_round(ServerState.initial(init_params(cfg, 0), False), clients, ds, empty_schedule(1, 2, 2), TrainConfig(strategy=Strategy.PM))

    def test_events_and_traffic(self, rng):
        cfg = self._cfg()
        ds = _dataset(rng, cfg)
        clients = _clients([np.arange(20), np.arange(20, 40)])
        sched = build_schedule(1, 1.0, 2, 2, "independent", seed=0)
        server = ServerState.initial(init_params(cfg, 0), True)
        _, out = run_round(server, clients, ds, sched, TrainConfig(strategy=Strategy.PMM))
        assert [e.client for e in out.clients] == [0, 1]
        kinds = {(e.kind, e.direction) for e in out.comm}
        assert ("model", "up") in kinds and ("model", "down") in kinds
        for e in out.clients:
            assert e.available == sched.available(0, e.client) and np.isfinite(e.local_loss)


class TestExperiment:
    def test_zero_rounds(self):
        assert run_experiment(small_config(rounds=0), 0).records == []

    def test_degeneracy_at_lambda_zero(self):
        runs = {s: run_experiment(small_config(s, rounds=12, lam=0.0), 1) for s in ("FM", "PM", "ZF", "PMM")}
        ref = runs["FM"]
        for s, r in runs.items():
            assert r.server.params.bit_identical(ref.server.params), s
            assert [x.test_acc for x in r.records] == [x.test_acc for x in ref.records]
            assert [x.train_loss for x in r.records] == [x.train_loss for x in ref.records]

    @pytest.mark.parametrize("strategy", ["PM", "PMM"])
    def test_missing_block_freeze(self, strategy):
        res = run_experiment(small_config(strategy, rounds=15, lam=0.6), 2, keep_uploads=True)
        checked = 0
        for t, (glob, uploads) in enumerate(res.uploads):
            for k, local in uploads.items():
                for m in res.schedule.missing_set(t, k):
                    assert local.blocks[m + 1].tobytes() == glob.blocks[m + 1].tobytes()
                    checked += 1
        assert checked > 0

    def test_workers_bit_identical(self):
        cfg = small_config("PMM", rounds=10, lam=0.5)
        runs = [run_experiment(cfg, 4, workers=w) for w in (1, 2, 3)]
        for r in runs[1:]:
            assert r.server.params.bit_identical(runs[0].server.params)
            assert same_rows(r.rows(), runs[0].rows())

    def test_checkpoint_resume_bit_exact(self, tmp_path):
        cfg = small_config("PMM", rounds=10, lam=0.5, pmm={"bits": 4, "delay": 2})
        whole = run_experiment(cfg, 3)
        ck = tmp_path / "ck.zip"
        run_experiment(cfg, 3, checkpoint=ck, stop_after=6)
        resumed = run_experiment(cfg, 3, resume=ck)
        assert resumed.server.params.bit_identical(whole.server.params)
        assert resumed.server.prototypes.equals(whole.server.prototypes)
        assert same_rows(resumed.rows(), whole.rows())

    def test_resume_wrong_seed(self, tmp_path):
        cfg = small_config("PM", rounds=4)
        ck = tmp_path / "ck.zip"
        run_experiment(cfg, 3, checkpoint=ck, stop_after=2)
        with pytest.raises(ValueError):
            run_experiment(cfg, 4, resume=ck)

    def test_fm_reports_zero_lambda(self):
        res = run_experiment(small_config("FM", rounds=3, lam=0.5), 0)
        assert res.meta["lambda"] == 0.0 and res.schedule.missing == {}

    def test_pmm_prototypes_built(self):
        res = run_experiment(small_config("PMM", rounds=10, lam=0.5), 0)
        assert res.server.prototypes.initialized.any()
        assert res.records[-1].proto_bits_total > 0
