import numpy as np
import pytest

from odmixer import autodiff as ad
from odmixer.autodiff import Parameter, Tape, Tensor
from odmixer.errors import ConfigError, NumericError
from odmixer.evaluation import metrics
from odmixer.model import ModelConfig, ODMixer
from odmixer.od_data import ODDataset, enumerate_windows
from odmixer.training import (
    Adam,
    DaySplit,
    TrainConfig,
    WindowBatcher,
    dual_mae_loss,
    fit_normalizer,
    train,
    write_history,
    read_history,
)

TINY_MODEL = ModelConfig(n=6, horizon=3, channels=4, layers=1)
TINY_TRAIN = TrainConfig(
    max_epochs=2, patience=5, train_days=10, val_days=3, test_days=3, seed=0
)


class TestLoss:
    def test_exact_prediction_is_zero(self, rng):
        gt = rng.standard_normal((2, 2)).astype(np.float32)
        loss = dual_mae_loss(Tensor(gt), Tensor(gt), gt, gt)
        assert loss.item() == 0.0

    def test_hand_example(self):
        gt = np.zeros((2, 2), dtype=np.float32)
        residual = np.array([[1.0, -1.0], [0.0, 2.0]], dtype=np.float32)
        loss = dual_mae_loss(Tensor(gt), Tensor(gt + residual), gt, gt)
        assert loss.item() == pytest.approx(1.0)

    def test_residual_homogeneity(self, rng):
        gt = np.zeros((3, 3), dtype=np.float32)
        residual = rng.standard_normal((3, 3)).astype(np.float32)
        one = dual_mae_loss(Tensor(gt + residual), Tensor(gt), gt, gt).item()
        two = dual_mae_loss(Tensor(gt + 2 * residual), Tensor(gt), gt, gt).item()
        assert two == pytest.approx(2 * one, rel=1e-6)

    def test_single_branch_under_ablation(self, rng):
        gt = np.zeros((2, 2), dtype=np.float32)
        pred = rng.standard_normal((2, 2)).astype(np.float32)
        loss = dual_mae_loss(None, Tensor(pred), None, gt)
        assert loss.item() == pytest.approx(np.abs(pred).mean(), rel=1e-6)

    def test_agrees_with_evaluation_metric(self, rng):
        pred_prev = rng.standard_normal((4, 4)).astype(np.float32)
        pred_cur = rng.standard_normal((4, 4)).astype(np.float32)
        gt_prev = rng.standard_normal((4, 4)).astype(np.float32)
        gt_cur = rng.standard_normal((4, 4)).astype(np.float32)
        loss = dual_mae_loss(Tensor(pred_prev), Tensor(pred_cur), gt_prev, gt_cur).item()
        via_metrics = metrics(pred_prev, gt_prev).mae + metrics(pred_cur, gt_cur).mae
        assert loss == pytest.approx(via_metrics, abs=1e-6)

    def test_batched_mean(self, rng):
        gt = np.zeros((5, 2, 2), dtype=np.float32)
        pred = rng.standard_normal((5, 2, 2)).astype(np.float32)
        loss = dual_mae_loss(None, Tensor(pred), None, gt)
        assert loss.item() == pytest.approx(np.abs(pred).mean(), rel=1e-6)


class TestAdam:
    def _scalar_param(self, value=1.0):
        return Parameter("w", np.array([value], dtype=np.float64))

    def test_zero_gradient_keeps_parameters(self):
        p = self._scalar_param(3.0)
        opt = Adam([p])
        p.tensor.grad = np.zeros(1)
        opt.step()
        assert opt.step_count == 1
        assert p.data[0] == 3.0

    def test_missing_gradient_treated_as_zero(self):
        p = self._scalar_param(3.0)
        opt = Adam([p])
        opt.step()
        assert p.data[0] == 3.0

    def test_first_step_magnitude_is_learning_rate(self):
        # with g=1 at step 1 the bias-corrected update is lr / (1 + eps)
        p = self._scalar_param(0.0)
        opt = Adam([p], learning_rate=0.01)
        p.tensor.grad = np.ones(1)
        opt.step()
        assert p.data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_hand_checked_second_step(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = self._scalar_param(0.0)
        opt = Adam([p], learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
        theta, m, v = 0.0, 0.0, 0.0
        for t, g in [(1, 0.5), (2, -1.5)]:
            p.tensor.grad = np.array([g])
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        assert p.data[0] == pytest.approx(theta, rel=1e-12)

    def test_non_finite_gradient_aborts_before_mutation(self):
        p = self._scalar_param(2.0)
        opt = Adam([p])
        p.tensor.grad = np.array([np.nan])
        with pytest.raises(NumericError):
            opt.step()
        assert p.data[0] == 2.0
        assert opt.step_count == 0

    def test_deterministic_trajectory(self, rng):
        grads = [rng.standard_normal(4).astype(np.float32) for _ in range(10)]

        def run():
            p = Parameter("w", np.ones(4, dtype=np.float32))
            opt = Adam([p], learning_rate=1e-2)
            for g in grads:
                p.tensor.grad = g.copy()
                opt.step()
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestConfigValidation:
    def test_bad_batch_size(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)

    def test_bad_patience(self):
        with pytest.raises(ConfigError):
            TrainConfig(patience=0)

    def test_split_overflow(self):
        with pytest.raises(ConfigError):
            DaySplit.from_config(10, TrainConfig(train_days=8, val_days=2, test_days=2))

    def test_split_ranges(self):
        split = DaySplit.from_config(28, TrainConfig())
        assert (split.train, split.val, split.test) == (range(0, 20), range(20, 24), range(24, 28))


class TestBatcher:
    def test_inputs_and_targets_align(self, tiny_dataset):
        split = DaySplit.from_config(tiny_dataset.days, TINY_TRAIN)
        normalizer = fit_normalizer(tiny_dataset, split)
        batcher = WindowBatcher(tiny_dataset, normalizer)
        windows = enumerate_windows(tiny_dataset, 3, require_week_history=True)[:5]
        prev, cur = batcher.inputs(windows)
        n = tiny_dataset.n
        assert prev.shape == (5, n, n, 3) and cur.shape == (5, n, n, 3)
        w = windows[0]
        expected_prev = normalizer.apply(
            np.moveaxis(tiny_dataset.od[w.day - 1, w.interval - 2 : w.interval + 1], 0, -1)
        )
        np.testing.assert_allclose(prev[0], expected_prev, atol=1e-6)
        gt_prev, gt_cur = batcher.raw_targets(windows)
        np.testing.assert_array_equal(gt_cur[0], tiny_dataset.od[w.day, w.interval + 1])
        np.testing.assert_array_equal(gt_prev[0], tiny_dataset.od[w.day - 1, w.interval + 1])

    def test_raw_iod_inputs_without_estimation(self, tiny_dataset):
        split = DaySplit.from_config(tiny_dataset.days, TINY_TRAIN)
        normalizer = fit_normalizer(tiny_dataset, split)
        batcher = WindowBatcher(tiny_dataset, normalizer, use_omp=False)
        windows = enumerate_windows(tiny_dataset, 3, require_week_history=True)[:2]
        _, cur = batcher.inputs(windows)
        w = windows[0]
        expected = normalizer.apply(
            np.moveaxis(tiny_dataset.iod[w.day, w.interval - 2 : w.interval + 1], 0, -1)
        )
        np.testing.assert_allclose(cur[0], expected, atol=1e-6)


class TestGradientFlow:
    def _one_step_grads(self, cfg, tiny_dataset, seed=0):
        split = DaySplit.from_config(tiny_dataset.days, TINY_TRAIN)
        normalizer = fit_normalizer(tiny_dataset, split)
        model = ODMixer(cfg, dtype=np.float32, seed=seed)
        batcher = WindowBatcher(tiny_dataset, normalizer, use_omp=cfg.use_omp)
        windows = enumerate_windows(tiny_dataset, cfg.horizon, require_week_history=True)[:8]
        prev, cur = batcher.inputs(windows)
        gt_prev, gt_cur = batcher.normalized_targets(windows)
        model.zero_grad()
        with Tape() as tape:
            pred_prev, pred_cur = model.forward(prev, cur)
            loss = dual_mae_loss(pred_prev, pred_cur, gt_prev, gt_cur)
        tape.backward(loss)
        return model

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_all_parameters_receive_gradient(self, tiny_dataset, seed):
        cfg = ModelConfig(n=6, horizon=3, channels=4, layers=2)
        model = self._one_step_grads(cfg, tiny_dataset, seed=seed)
        for p in model.parameters():
            assert p.grad is not None, p.name
            assert np.any(p.grad != 0), f"{p.name} has all-zero gradient"

    def test_ablated_blocks_have_exactly_zero_gradient(self, tiny_dataset):
        cfg = ModelConfig(
            n=6, horizon=3, channels=4, layers=1,
            use_btl=False, use_origin_mixer=False,
        )
        model = self._one_step_grads(cfg, tiny_dataset)
        for p in model.parameters():
            grad = p.grad
            if p.name.startswith("btl.") or ".om." in p.name:
                assert grad is None or not np.any(grad), p.name
            else:
                assert grad is not None and np.any(grad), p.name

    def test_prev_branch_ablation_still_updates_shared_weights(self, tiny_dataset):
        cfg = ModelConfig(n=6, horizon=3, channels=4, layers=1, use_prev_branch=False, use_btl=False)
        model = self._one_step_grads(cfg, tiny_dataset)
        assert np.any(model.param("embed.w").grad)
        assert model.param("btl.prev.mix_w").grad is None


class TestTrainLoop:
    def test_zero_learning_rate_is_a_no_op(self, tiny_dataset):
        cfg = TrainConfig(
            learning_rate=0.0, max_epochs=3, patience=5,
            train_days=10, val_days=3, test_days=3, seed=0,
        )
        model = ODMixer(TINY_MODEL, dtype=np.float32, seed=0)
        before = {p.name: p.data.copy() for p in model.parameters()}
        result = train(model, tiny_dataset, cfg)
        for p in model.parameters():
            np.testing.assert_array_equal(p.data, before[p.name])
        losses = [r.train_loss for r in result.history]
        # shuffling regroups float32 batch sums; only reduction noise remains
        assert max(losses) - min(losses) < 1e-5 * max(losses)

    def test_single_window_overfit_drives_loss_down(self):
        rng = np.random.default_rng(0)
        n, p_intervals, days = 4, 6, 10
        iod = rng.integers(1, 6, (days, p_intervals, n, n)).astype(np.float32)
        uod = rng.integers(1, 6, (days, p_intervals, n, n)).astype(np.float32)
        # repeat one day so every window sees the same pattern
        ds = ODDataset(np.repeat(iod[:1], days, axis=0), np.repeat(uod[:1], days, axis=0))
        cfg = TrainConfig(
            learning_rate=1e-2, max_epochs=150, patience=150, train_days=8,
            val_days=1, test_days=1, batch_size=8, seed=1,
        )
        model = ODMixer(ModelConfig(n=4, horizon=2, channels=4, layers=1), np.float32, seed=1)
        result = train(model, ds, cfg)
        losses = [r.train_loss for r in result.history]
        assert losses[-1] < 0.3 * losses[0]
        smoothed = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert smoothed[-1] == min(smoothed)  # decreasing in trend toward a floor

    def test_empty_window_set_is_config_error(self, tiny_dataset):
        cfg = TrainConfig(train_days=6, val_days=5, test_days=5, max_epochs=1)
        model = ODMixer(TINY_MODEL, dtype=np.float32, seed=0)
        with pytest.raises(ConfigError):
            train(model, tiny_dataset, cfg)  # train days all lack week history

    def test_seeded_runs_are_bit_identical(self, tiny_dataset, tmp_path):
        outputs = []
        for run in range(2):
            model = ODMixer(TINY_MODEL, dtype=np.float32, seed=7)
            path = tmp_path / f"history_{run}.csv"
            train(model, tiny_dataset, TINY_TRAIN, history_path=path)
            outputs.append((
                {p.name: p.data.copy() for p in model.parameters()},
                path.read_text(),
            ))
        params_a, hist_a = outputs[0]
        params_b, hist_b = outputs[1]
        for name in params_a:
            assert np.array_equal(params_a[name], params_b[name]), name
        strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]
        assert strip(hist_a) == strip(hist_b)  # identical apart from wall-clock column

    def test_early_stopping_restores_best(self, tiny_dataset):
        cfg = TrainConfig(
            max_epochs=6, patience=1, train_days=10, val_days=3, test_days=3, seed=3
        )
        model = ODMixer(TINY_MODEL, dtype=np.float32, seed=3)
        result = train(model, tiny_dataset, cfg)
        assert result.best_epoch <= result.history[-1].epoch
        best = min(result.history, key=lambda r: r.val_wmape)
        assert best.epoch == result.best_epoch


class TestHistoryFile:
    def test_round_trip(self, tmp_path, tiny_dataset):
        model = ODMixer(TINY_MODEL, dtype=np.float32, seed=0)
        result = train(model, tiny_dataset, TINY_TRAIN)
        path = tmp_path / "history.csv"
        write_history(result.history, path)
        loaded = read_history(path)
        assert [r.epoch for r in loaded] == [r.epoch for r in result.history]
        assert loaded[0].val_wmape == pytest.approx(result.history[0].val_wmape, abs=1e-8)
