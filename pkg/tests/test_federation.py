import time

import numpy as np
import pytest

from projres.config import loads
from projres.data import synthetic_dataset
from projres.defenses import DefenseConfig, apply_defense
from projres.exceptions import ValidationError
from projres.experiment import build_data
from projres.federation import (BatchSampler, FederationConfig, FedSGD, aggregate_and_step,
                                client_round, partition_data, run_training)
from projres.io import export_trace, import_trace
from projres.model import BackboneConfig, FedModel, GradientUpdate, ModuleSpec, build_backbone


def tiny_setup(num_samples=40):
    bb = build_backbone(BackboneConfig(vocab_size=50, hidden_dim=16))
    model = FedModel(bb, (ModuleSpec("adapter", 2.0, 2),))
    return model, synthetic_dataset(num_samples, 50, 2, 2, 4, seed=0)


class TestPartition:
    def test_even(self):
        parts = partition_data(100, 4, seed=0)
        assert [len(p) for p in parts] == [25] * 4

    def test_remainder(self):
        parts = partition_data(10, 3, seed=0)
        assert sorted(len(p) for p in parts) == [3, 3, 4]
        assert sorted(np.concatenate(parts).tolist()) == list(range(10))

    def test_deterministic(self):
        a = partition_data(57, 5, seed=3)
        b = partition_data(57, 5, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_too_many_clients(self):
        with pytest.raises(ValidationError):
            partition_data(3, 4, seed=0)


class TestBatchSampler:
    def test_epoch_without_replacement(self):
        s = BatchSampler(np.arange(10), 2, seed=[0])
        seen = np.concatenate([s.next_batch() for _ in range(5)])
        assert sorted(seen.tolist()) == list(range(10))


class TestClientRound:
    def test_no_defense_is_raw_gradient(self):
        model, ds = tiny_setup()
        params = model.init_params(0)
        seqs, labels = ds.batch([0, 1])
        _, raw = model.loss_and_gradients(params, seqs, labels)
        _, up = client_round(model, params, ds, [0, 1], None, 0, 0)
        for k in raw.grads:
            np.testing.assert_array_equal(raw.grads[k], up.grads[k])

    def test_saturated_head_gives_tiny_gradient(self):
        model, ds = tiny_setup()
        params = model.init_params(0)
        params["head.weight"] = params["head.weight"] * 1e4
        seqs, _ = ds.batch([0, 1])
        labels = model.predict(params, seqs)
        _, g = model.loss_and_gradients(params, seqs, labels)
        assert g.frobenius_norm() < 1e-8

    def test_dp_clip_to_norm_one(self):
        # scale a real gradient to norm 4, then clip with sigma 0
        model, ds = tiny_setup()
        params = model.init_params(0)
        _, g = model.loss_and_gradients(params, *ds.batch([0, 1]))
        only = GradientUpdate({k: v for k, v in g.grads.items() if k.startswith("m0.")})
        only = GradientUpdate({k: v * (4.0 / only.frobenius_norm()) for k, v in only.grads.items()})
        assert only.frobenius_norm() == pytest.approx(4.0, rel=1e-12)
        out = apply_defense(only, DefenseConfig("dp", sigma=0.0, clip=1.0))
        assert abs(out.frobenius_norm() - 1.0) < 1e-12


class TestAggregate:
    def up(self, g, c):
        return GradientUpdate({"w": np.asarray(g, dtype=float)}, 0, c)

    def test_single_client(self):
        out = aggregate_and_step({"w": np.array([1.0, 2.0])}, [self.up([0.5, -1.0], 0)], 1.0)
        np.testing.assert_array_equal(out["w"], [0.5, 3.0])

    def test_zero_gradients(self):
        theta = {"w": np.array([1.0, 2.0])}
        out = aggregate_and_step(theta, [self.up([0.0, 0.0], 0), self.up([0.0, 0.0], 1)], 0.3)
        np.testing.assert_array_equal(out["w"], theta["w"])

    def test_cancellation(self):
        theta = {"w": np.array([1.0, 2.0])}
        g = np.array([0.3, -0.7])
        out = aggregate_and_step(theta, [self.up(g, 0), self.up(-g, 1)], 1.0)
        assert np.max(np.abs(out["w"] - theta["w"])) < 1e-15

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        ups = [self.up(rng.standard_normal(5), c) for c in range(7)]
        theta = {"w": np.zeros(5)}
        a = aggregate_and_step(theta, ups, 0.1)
        b = aggregate_and_step(theta, list(reversed(ups)), 0.1)
        c = aggregate_and_step(theta, {u.client: u for u in rng.permutation(ups)}, 0.1)
        np.testing.assert_array_equal(a["w"], b["w"])
        np.testing.assert_array_equal(a["w"], c["w"])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            aggregate_and_step({"w": np.zeros(2)}, [self.up([1.0, 2.0, 3.0], 0)], 1.0)


class TestRunTraining:
    def test_one_round_one_client(self):
        model, ds = tiny_setup()
        trace = run_training(FederationConfig(1, 2, 0.1, 1, 0), ds, model)
        assert len(trace) == 1 and list(trace[0].updates) == [0]

    def test_trace_shape(self):
        model, ds = tiny_setup()
        trace = run_training(FederationConfig(4, 2, 0.1, 3, 0), ds, model)
        assert trace.rounds == [0, 1, 2]
        assert all(len(trace[t].updates) == 4 for t in trace.rounds)
        for t in trace.rounds:
            for k, batch in trace[t].batches.items():
                assert set(batch.tolist()) <= set(trace.partitions[k].tolist())

    def test_params_recurrence(self):
        model, ds = tiny_setup()
        cfg = FederationConfig(3, 2, 0.1, 2, 0)
        trace = run_training(cfg, ds, model)
        nxt = aggregate_and_step(trace[0].params, trace[0].updates, cfg.learning_rate)
        for k in nxt:
            np.testing.assert_array_equal(nxt[k], trace.params_at(1)[k])
        assert trace.params_at(2) is trace.final_params

    def test_deterministic_and_thread_independent(self, monkeypatch):
        model, ds = tiny_setup()
        cfg = FederationConfig(4, 2, 0.1, 3, 1, DefenseConfig("dp", sigma=0.1, clip=1.0))
        a = run_training(cfg, ds, model)
        monkeypatch.setenv("PROJRES_THREADS", "3")
        b = run_training(cfg, ds, model)
        for t in a.rounds:
            for c in a[t].updates:
                np.testing.assert_array_equal(a[t].updates[c].vector(), b[t].updates[c].vector())

    def test_adversary_view_hides_batches(self):
        model, ds = tiny_setup()
        view = run_training(FederationConfig(2, 2, 0.1, 2, 0), ds, model).adversary_view()
        assert not hasattr(view, "batches")
        assert view.rounds == [0, 1]

    def test_restrict(self):
        model, ds = tiny_setup()
        trace = run_training(FederationConfig(3, 2, 0.1, 3, 0), ds, model)
        r = trace.restrict(rounds=[2], clients=[0, 2])
        assert r.rounds == [2] and sorted(r[2].updates) == [0, 2]

    def test_export_import_round_trip(self, tmp_path):
        model, ds = tiny_setup()
        trace = run_training(FederationConfig(3, 2, 0.1, 2, 0, DefenseConfig("gp", beta=0.5)), ds, model)
        back = import_trace(export_trace(trace, tmp_path / "tr"))
        assert back.config == trace.config
        for t in trace.rounds:
            for c in trace[t].updates:
                np.testing.assert_array_equal(back[t].updates[c].vector(), trace[t].updates[c].vector())
                np.testing.assert_array_equal(back[t].batches[c], trace[t].batches[c])
            assert back[t].losses == trace[t].losses
        for k in trace.final_params:
            np.testing.assert_array_equal(back.final_params[k], trace.final_params[k])

    def test_estimator(self):
        model, ds = tiny_setup()
        est = FedSGD(num_clients=2, rounds=2).fit(ds, model)
        assert len(est.trace_) == 2
        assert est.get_params()["num_clients"] == 2


def test_default_config_budget_and_loss_trend():
    cfg = loads("{}")
    split = build_data(cfg)
    model = cfg.build_model()
    t0 = time.perf_counter()
    trace = run_training(cfg.federation, split.dataset, model, split.train_ids)
    assert time.perf_counter() - t0 < 60
    seqs, labels = split.dataset.batch(split.train_ids)
    # mean loss over the training set, with the parameters after rounds 1 and 20
    after1 = model.loss_and_gradients(trace.params_at(1), seqs, labels)[0]
    after20 = model.loss_and_gradients(trace.params_at(20), seqs, labels)[0]
    assert after20 < after1
