"""Tests for the training loop: config parsing, batching, checkpoints, ablation."""

import csv
import dataclasses
import math
import struct

import numpy as np
import pytest
import torch

from flowcast.errors import ConfigError, DataError, NumericsError
from flowcast.losses import LossBreakdown
from flowcast.scene import SceneRecord, fit_normalizer
from flowcast.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    TrainData,
    compute_batch_loss,
    config_hash,
    config_to_text,
    derived_seed,
    evaluate_model,
    load_checkpoint,
    load_model,
    make_model,
    make_optimizer,
    parse_train_config,
    predict,
    read_train_config,
    run_ablation,
    split_indices,
    train,
    train_step,
    write_ablation_csv,
)


class TestConfigParsing:
    def test_text_round_trip(self):
        config = TrainConfig(
            epochs=7,
            batch_size=3,
            peak_lr=2.5e-4,
            lambda_rank=0.37,
            sc_probability=0.25,
            regression_mode="l2",
            rank_on_logits=True,
            time_schedule="beta",
            time_beta_a=2.0,
            time_beta_b=5.0,
            nms_radius=1.25,
            k_out=4,
        )
        assert parse_train_config(config_to_text(config)) == config

    def test_comments_blanks_and_base(self, tiny_train_config):
        text = """
        # schedule
        epochs = 9   # inline comment

        peak_lr = 0.002
        """
        config = parse_train_config(text, base=tiny_train_config)
        assert config.epochs == 9
        assert config.peak_lr == 0.002
        assert config.batch_size == tiny_train_config.batch_size
        assert config.enc_dim == tiny_train_config.enc_dim

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_train_config("epochs = 3\nbogus_key = 1\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_train_config("epochs 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_train_config("epochs = three\n")

    def test_bool_parsing(self):
        for raw, expected in [("true", True), ("1", True), ("yes", True), ("false", False), ("0", False), ("no", False)]:
            assert parse_train_config(f"rank_on_logits = {raw}\n").rank_on_logits is expected
        with pytest.raises(ConfigError, match="bad value"):
            parse_train_config("rank_on_logits = maybe\n")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"epochs": 0},
            {"batch_size": 0},
            {"peak_lr": -1e-3},
            {"lambda_rank": -0.1},
            {"sc_probability": 1.5},
            {"regression_mode": "huber"},
            {"optimizer": "rmsprop"},
            {"time_schedule": "cosine"},
            {"k_out": 9, "n_queries": 8},
            {"holdout_fraction": 1.0},
            {"eval_steps": 0},
        ],
    )
    def test_validation_rejects(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides)

    def test_config_hash_sensitivity(self):
        base = TrainConfig()
        assert config_hash(base) == config_hash(TrainConfig())
        assert len(config_hash(base)) == 16
        int(config_hash(base), 16)  # hex digest
        for change in [{"epochs": 21}, {"peak_lr": 2e-3}, {"rank_on_logits": True}, {"seed": 1}]:
            assert config_hash(dataclasses.replace(base, **change)) != config_hash(base)

    def test_read_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_train_config(tmp_path / "absent.cfg")

    def test_read_file_round_trip(self, tmp_path, tiny_train_config):
        path = tmp_path / "train.cfg"
        path.write_text(config_to_text(tiny_train_config))
        assert read_train_config(path) == tiny_train_config


class TestSeedsAndSplit:
    def test_derived_seed_deterministic_and_bounded(self, np_rng):
        assert derived_seed(1, 2, 3) == derived_seed(1, 2, 3)
        seen = set()
        for _ in range(300):
            parts = tuple(int(v) for v in np_rng.integers(0, 2**31, size=np_rng.integers(1, 4)))
            value = derived_seed(*parts)
            assert 0 <= value < 2**63
            seen.add((parts, value))
        values = [v for _, v in seen]
        assert len(set(values)) == len(values)  # no collisions across distinct inputs

    def test_split_partitions_everything(self, np_rng):
        for _ in range(50):
            n = int(np_rng.integers(1, 200))
            fraction = float(np_rng.uniform(0.0, 0.99))
            seed = int(np_rng.integers(0, 2**31))
            train_idx, holdout_idx = split_indices(n, fraction, seed)
            assert holdout_idx.size == math.floor(n * fraction)
            assert train_idx.size + holdout_idx.size == n
            merged = np.sort(np.concatenate([train_idx, holdout_idx]))
            assert np.array_equal(merged, np.arange(n))
            assert np.all(np.diff(train_idx) > 0)
            again = split_indices(n, fraction, seed)
            assert np.array_equal(again[0], train_idx) and np.array_equal(again[1], holdout_idx)

    def test_split_depends_on_seed(self):
        a, _ = split_indices(100, 0.5, seed=0)
        b, _ = split_indices(100, 0.5, seed=1)
        assert not np.array_equal(a, b)

    def test_zero_fraction_gives_empty_holdout(self):
        train_idx, holdout_idx = split_indices(20, 0.0, seed=3)
        assert holdout_idx.size == 0
        assert np.array_equal(train_idx, np.arange(20))


class TestTrainData:
    def test_normalized_targets_match_records(self, records, train_data):
        assert len(train_data) == len(records)
        assert train_data.t_future == records[0].future.horizon
        for i, record in enumerate(records):
            expected = train_data.normalizer.normalize_array(record.future.waypoints)
            np.testing.assert_allclose(train_data.gt_norm[i].numpy(), expected, rtol=0, atol=0)

    def test_empty_dataset_rejected(self, train_data):
        with pytest.raises(DataError, match="empty"):
            TrainData.from_records([], train_data.normalizer)

    def test_mixed_horizons_rejected(self, records, train_data, gen_config):
        import dataclasses as dc

        from flowcast.scene import generate_scene

        short_cfg = dc.replace(gen_config, t_future=gen_config.t_future - 2)
        context, future = generate_scene(99, short_cfg)
        mixed = list(records) + [SceneRecord("short", context, future)]
        with pytest.raises(DataError, match="horizon"):
            TrainData.from_records(mixed, train_data.normalizer)

    def test_subset_slices_batch_and_targets(self, train_data):
        idx = [5, 0, 3]
        batch, gt = train_data.subset(idx)
        assert torch.equal(gt, train_data.gt_norm[torch.tensor(idx)])
        for field in dataclasses.fields(type(train_data.batch)):
            full = getattr(train_data.batch, field.name)
            part = getattr(batch, field.name)
            assert torch.equal(part, full[torch.tensor(idx)])


class TestBatchLoss:
    def test_make_model_seeded(self, tiny_train_config, train_data):
        a = make_model(tiny_train_config, train_data.t_future)
        b = make_model(tiny_train_config, train_data.t_future)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name
        other = make_model(dataclasses.replace(tiny_train_config, seed=7), train_data.t_future)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.state_dict().values(), other.state_dict().values()))

    def test_compute_batch_loss_deterministic(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        batch, gt = train_data.subset(range(4))
        outs = []
        for _ in range(2):
            gen = torch.Generator().manual_seed(11)
            terms, diag = compute_batch_loss(model, batch, gt, tiny_train_config, train_data.normalizer, gen)
            outs.append((float(terms.total.detach()), diag))
        assert outs[0][0] == outs[1][0]
        assert 0.0 <= outs[0][1]["t"] < 1.0
        assert outs[0][1] == outs[1][1]

    def test_self_conditioning_coin(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        batch, gt = train_data.subset(range(4))
        never = dataclasses.replace(tiny_train_config, sc_probability=0.0)
        always = dataclasses.replace(tiny_train_config, sc_probability=1.0)
        _, diag_never = compute_batch_loss(model, batch, gt, never, train_data.normalizer, torch.Generator().manual_seed(0))
        _, diag_always = compute_batch_loss(model, batch, gt, always, train_data.normalizer, torch.Generator().manual_seed(0))
        assert diag_never["sc_fired"] is False
        assert diag_always["sc_fired"] is True

    @pytest.mark.parametrize("sc_probability", [0.0, 1.0])
    def test_total_is_weighted_sum(self, tiny_train_config, train_data, sc_probability):
        config = dataclasses.replace(tiny_train_config, sc_probability=sc_probability, lambda_rank=0.31)
        model = make_model(config, train_data.t_future)
        batch, gt = train_data.subset(range(3))
        terms, _ = compute_batch_loss(model, batch, gt, config, train_data.normalizer, torch.Generator().manual_seed(5))
        expected = terms.l_flow + terms.l_cls + config.lambda_rank * terms.l_rank
        assert torch.isclose(terms.total, expected, rtol=1e-12, atol=0)

    def test_beta_time_schedule_runs(self, tiny_train_config, train_data):
        config = dataclasses.replace(tiny_train_config, time_schedule="beta", time_beta_a=2.0, time_beta_b=5.0)
        model = make_model(config, train_data.t_future)
        batch, gt = train_data.subset(range(2))
        terms, diag = compute_batch_loss(model, batch, gt, config, train_data.normalizer, torch.Generator().manual_seed(1))
        assert torch.isfinite(terms.total)
        assert 0.0 <= diag["t"] < 1.0


class TestTrainStep:
    def test_loss_descends_on_fixed_batch(self, tiny_train_config, train_data):
        config = dataclasses.replace(
            tiny_train_config, regression_mode="l2", sc_probability=0.0, peak_lr=5e-3
        )
        model = make_model(config, train_data.t_future)
        optimizer = make_optimizer(model, config)
        batch, gt = train_data.subset(range(8))
        gen = torch.Generator().manual_seed(3)
        totals = []
        for _ in range(25):
            terms, _ = train_step(model, optimizer, batch, gt, config, train_data.normalizer, gen)
            totals.append(float(terms.total))
        assert np.mean(totals[-5:]) < 0.9 * np.mean(totals[:5])

    def test_returns_detached_losses(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        optimizer = make_optimizer(model, tiny_train_config)
        batch, gt = train_data.subset(range(2))
        terms, _ = train_step(model, optimizer, batch, gt, tiny_train_config, train_data.normalizer, torch.Generator().manual_seed(0))
        assert terms.total.grad_fn is None

    def test_nan_weights_abort_training(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        optimizer = make_optimizer(model, tiny_train_config)
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        batch, gt = train_data.subset(range(2))
        with pytest.raises(NumericsError):
            train_step(model, optimizer, batch, gt, tiny_train_config, train_data.normalizer, torch.Generator().manual_seed(0))

    def test_nonfinite_loss_raises_with_diagnostics(self, monkeypatch, tiny_train_config, train_data):
        nan = torch.tensor(float("nan"))
        bad = LossBreakdown(l_flow=nan, l_cls=nan, l_rank=nan, total=nan, best_index=-1)
        monkeypatch.setattr(
            "flowcast.trainer.compute_batch_loss", lambda *args, **kwargs: (bad, {"sc_fired": False, "t": 0.5})
        )
        model = make_model(tiny_train_config, train_data.t_future)
        optimizer = make_optimizer(model, tiny_train_config)
        batch, gt = train_data.subset(range(2))
        with pytest.raises(NumericsError, match="l_flow"):
            train_step(model, optimizer, batch, gt, tiny_train_config, train_data.normalizer, torch.Generator().manual_seed(0))

    def test_zero_lr_freezes_parameters(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        optimizer = make_optimizer(model, tiny_train_config)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        batch, gt = train_data.subset(range(2))
        train_step(model, optimizer, batch, gt, tiny_train_config, train_data.normalizer, torch.Generator().manual_seed(0), lr=0.0)
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, before[name]), name


class TestTrainLoop:
    def test_deterministic_given_config(self, records, tiny_train_config):
        a = train(records, tiny_train_config)
        b = train(records, tiny_train_config)
        for (name, pa), (_, pb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(pa, pb), name
        assert [r["total"] for r in a.log_rows] == [r["total"] for r in b.log_rows]

    def test_log_file_and_lr_schedule(self, records, tiny_train_config, tmp_path):
        log_path = tmp_path / "log.csv"
        result = train(records, tiny_train_config, log_path=log_path)
        with log_path.open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == LOG_COLUMNS
        assert len(rows) == 1 + result.total_steps
        assert result.steps_done == result.total_steps
        for row in rows[1:]:
            step = int(row[0])
            lr = float(row[1])
            assert lr == tiny_train_config.peak_lr * (1.0 - (step - 1) / result.total_steps)
        # in-memory rows mirror the file
        assert [int(r[0]) for r in rows[1:]] == [r["step"] for r in result.log_rows]
        assert [float(r[5]) for r in rows[1:]] == [r["total"] for r in result.log_rows]

    def test_eval_history_cadence(self, records, tiny_train_config):
        result = train(records, tiny_train_config, eval_every=1)
        assert len(result.eval_history) == tiny_train_config.epochs
        steps_per_epoch = math.ceil(result.train_idx.size / tiny_train_config.batch_size)
        assert [at for at, _ in result.eval_history] == [
            (e + 1) * steps_per_epoch for e in range(tiny_train_config.epochs)
        ]
        for _, report in result.eval_history:
            assert np.isfinite(report.min_ade)
        assert train(records, tiny_train_config, eval_every=0).eval_history == []

    def test_max_steps_stops_early(self, records, tiny_train_config):
        result = train(records, tiny_train_config, max_steps=1)
        assert result.steps_done == 1
        assert len(result.log_rows) == 1


class TestCheckpoints:
    def test_round_trip_restores_everything(self, records, tiny_train_config, tmp_path):
        path = tmp_path / "model.ckpt"
        result = train(records, tiny_train_config, checkpoint_path=path)
        ck = load_checkpoint(path)
        assert ck.config == tiny_train_config
        assert ck.config_digest == config_hash(tiny_train_config)
        assert ck.step == result.steps_done
        assert ck.t_future == result.data.t_future
        np.testing.assert_array_equal(ck.normalizer.offset, result.normalizer.offset)
        np.testing.assert_array_equal(ck.normalizer.scale, result.normalizer.scale)
        state = result.model.state_dict()
        assert set(ck.model_state) == set(state)
        for name, tensor in state.items():
            assert torch.equal(ck.model_state[name], tensor), name
        assert any(key.endswith("exp_avg") for key in ck.opt_tensors)

    def test_resume_is_bit_exact(self, records, tiny_train_config, tmp_path):
        full = train(records, tiny_train_config)

        mid_path = tmp_path / "mid.ckpt"
        first = train(records, tiny_train_config, max_steps=2, checkpoint_path=mid_path)
        assert first.steps_done == 2
        resumed = train(records, tiny_train_config, resume_from=mid_path)
        assert resumed.steps_done == full.steps_done
        for (name, pa), (_, pb) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
            assert torch.equal(pa, pb), name
        # the resumed losses continue the full run's schedule exactly
        assert [r["total"] for r in resumed.log_rows] == [r["total"] for r in full.log_rows[2:]]

    def test_resume_appends_to_log(self, records, tiny_train_config, tmp_path):
        log_path = tmp_path / "log.csv"
        mid_path = tmp_path / "mid.ckpt"
        train(records, tiny_train_config, log_path=log_path, max_steps=2, checkpoint_path=mid_path)
        result = train(records, tiny_train_config, log_path=log_path, resume_from=mid_path)
        with log_path.open() as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + result.total_steps
        assert [int(r[0]) for r in rows[1:]] == list(range(1, result.total_steps + 1))

    def test_config_mismatch_rejected(self, records, tiny_train_config, tmp_path):
        path = tmp_path / "model.ckpt"
        train(records, tiny_train_config, max_steps=1, checkpoint_path=path)
        changed = dataclasses.replace(tiny_train_config, peak_lr=2e-3)
        with pytest.raises(ConfigError, match="different configuration"):
            train(records, changed, resume_from=path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_corrupted_files_rejected(self, records, tiny_train_config, tmp_path):
        path = tmp_path / "model.ckpt"
        train(records, tiny_train_config, max_steps=1, checkpoint_path=path)
        raw = path.read_bytes()

        garbage = tmp_path / "garbage.ckpt"
        garbage.write_bytes(b"not a checkpoint at all")
        with pytest.raises(DataError, match="bad magic"):
            load_checkpoint(garbage)

        wrong_version = tmp_path / "version.ckpt"
        wrong_version.write_bytes(raw[:4] + struct.pack("<I", 999) + raw[8:])
        with pytest.raises(DataError, match="version"):
            load_checkpoint(wrong_version)

        truncated = tmp_path / "truncated.ckpt"
        truncated.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(DataError, match="truncated"):
            load_checkpoint(truncated)

    def test_load_model_for_inference(self, records, tiny_train_config, tmp_path):
        path = tmp_path / "model.ckpt"
        result = train(records, tiny_train_config, checkpoint_path=path)
        model, config, normalizer = load_model(path)
        assert config == tiny_train_config
        np.testing.assert_array_equal(normalizer.scale, result.normalizer.scale)
        gen = torch.Generator().manual_seed(0)
        preds = predict(model, result.data, [0, 1], steps=2, config=config, generator=gen)
        assert [p.scene_id for p in preds] == [records[0].scene_id, records[1].scene_id]


class TestInferenceHelpers:
    def test_predict_contract(self, records, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        gen = torch.Generator().manual_seed(9)
        idx = [4, 1, 7]
        preds = predict(model, train_data, idx, steps=1, config=tiny_train_config, generator=gen)
        assert [p.scene_id for p in preds] == [records[i].scene_id for i in idx]
        for record in preds:
            modes = record.predictions
            assert modes.k == tiny_train_config.k_out
            assert ((modes.confidences >= 0.0) & (modes.confidences <= 1.0)).all()
            assert (np.diff(modes.confidences) <= 1e-12).all()
            assert modes.trajectories.shape == (tiny_train_config.k_out, train_data.t_future, 2)
            assert np.isfinite(modes.trajectories).all()
            live = modes.trajectories[~modes.padded]
            for i in range(live.shape[0]):
                for j in range(i + 1, live.shape[0]):
                    gap = np.linalg.norm(live[i, -1] - live[j, -1])
                    assert gap > tiny_train_config.nms_radius

    def test_evaluate_model_reports_finite_metrics(self, tiny_train_config, train_data):
        model = make_model(tiny_train_config, train_data.t_future)
        gen = torch.Generator().manual_seed(2)
        report = evaluate_model(model, train_data, range(6), steps=1, config=tiny_train_config, generator=gen)
        assert report.min_ade > 0 and np.isfinite(report.min_ade)
        assert report.min_fde > 0 and np.isfinite(report.min_fde)
        assert 0.0 <= report.miss_rate <= 1.0
        assert 0.0 <= report.map <= 1.0
        assert 0.0 <= report.soft_map <= 1.0


class TestAblation:
    def test_tiny_grid_contract(self, records, tiny_train_config, tmp_path):
        config = dataclasses.replace(tiny_train_config, epochs=1)
        csv_path = tmp_path / "ablation.csv"
        table = run_ablation(records, config, seeds=(0,), steps_list=(1, 2), out_csv=csv_path)
        assert len(table.rows) == 3 * 1 * 2
        assert {r.variant for r in table.rows} == {"full", "no_self_conditioning", "no_ranking"}
        assert {r.ode_steps for r in table.rows} == {1, 2}
        for row in table.rows:
            assert np.isfinite(row.min_ade) and np.isfinite(row.map)

        aggregated = table.aggregated()
        assert len(aggregated) == 6
        assert all(entry["n_seeds"] == 1 for entry in aggregated)
        by_key = {(e["variant"], e["ode_steps"]): e for e in aggregated}
        for row in table.rows:
            assert by_key[(row.variant, row.ode_steps)]["min_ade"] == pytest.approx(row.min_ade)

        assert table.seed_metric("full", 1, "min_ade") == {
            0: next(r.min_ade for r in table.rows if r.variant == "full" and r.ode_steps == 1)
        }

        with csv_path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:2] == ["variant", "ode_steps"]
        assert len(rows) == 1 + 6
        for row in rows[1:]:
            float(row[3])  # min_ade parses

    def test_csv_writer_creates_parents(self, records, tiny_train_config, tmp_path):
        config = dataclasses.replace(tiny_train_config, epochs=1)
        table = run_ablation(records, config, seeds=(0,), steps_list=(1,))
        nested = tmp_path / "reports" / "deep" / "ablation.csv"
        write_ablation_csv(nested, table)
        assert nested.exists()
