"""Losses, Adam updates, dataset splitting, training loop, grid search."""

import math

import numpy as np
import pytest
import torch

from cnncap import models, trainer
from cnncap.gridrep import (
    TASK_COUPLING,
    TASK_TOTAL,
    EncodedDataset,
    FeatureVector,
    GridSample,
)
from cnncap.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    grid_search,
    loss_fn,
    loss_mse,
    loss_msre,
    predict,
    save_history,
    split_dataset,
    train,
)

L = 32
TINY_CNN = models.CnnCapConfig(
    input_length=L, block_counts=(1, 1, 1, 1), channels=(4, 8, 16, 32))


def _sample(structure_id, target, task=TASK_TOTAL, env_id=None, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, 2.0, size=(3, L))
    return GridSample(
        feature=FeatureVector(L=L, values=values, task=task, env_id=env_id),
        target=target, structure_id=structure_id, env_id=env_id)


def _toy_dataset(n_structures=20, seed=0):
    """Structures whose total target is a smooth function of the feature mean,
    so a tiny CNN can actually fit them."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_structures):
        values = rng.uniform(0.0, 2.0, size=(3, L))
        target = 1.0 + float(values.mean())
        samples.append(GridSample(
            feature=FeatureVector(L=L, values=values, task=TASK_TOTAL),
            target=target, structure_id=f"S{i:03d}"))
    return EncodedDataset(L=L, samples=samples)


# --- losses ----------------------------------------------------------------

class TestLosses:
    def test_mse_hand_examples(self):
        assert float(loss_mse([1.0, 2.0], [1.0, 2.0])) == 0.0
        assert float(loss_mse([2.0], [1.0])) == 1.0
        assert float(loss_mse([1.0, 3.0], [2.0, 2.0])) == 1.0

    def test_msre_hand_examples(self):
        assert float(loss_msre([1.0, 2.0], [1.0, 2.0])) == 0.0
        assert float(loss_msre([2.0], [1.0])) == 1.0
        assert float(loss_msre([1.0], [2.0])) == 0.25

    def test_msre_zero_label_error(self):
        with pytest.raises(ValueError, match="nonzero"):
            loss_msre([1.0], [0.0])

    def test_length_mismatch_error(self):
        with pytest.raises(ValueError, match="shape"):
            loss_mse([1.0, 2.0], [1.0])

    def test_empty_error(self):
        with pytest.raises(ValueError, match="empty"):
            loss_mse([], [])

    def test_msre_scale_invariant_mse_quadratic(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.5, 2.0, size=8)
        y = rng.uniform(0.5, 2.0, size=8)
        for c in (0.3, 7.0):
            assert float(loss_msre(c * p, c * y)) == pytest.approx(
                float(loss_msre(p, y)), rel=1e-12)
            assert float(loss_mse(c * p, c * y)) == pytest.approx(
                c * c * float(loss_mse(p, y)), rel=1e-12)

    def test_vector_targets_sum_over_components(self):
        # per-sample squared vector norm, averaged over samples
        p = np.array([[1.0, 2.0], [0.0, 0.0]])
        y = np.array([[0.0, 0.0], [0.0, 0.0]])
        assert float(loss_mse(p, y)) == pytest.approx(2.5)

    def test_loss_fn_dispatch(self):
        assert loss_fn("mse") is loss_mse
        assert loss_fn("msre") is loss_msre
        with pytest.raises(ValueError, match="unknown loss"):
            loss_fn("mae")


# --- Adam ------------------------------------------------------------------

class TestAdam:
    def test_single_step_hand_value(self):
        theta = torch.zeros((), dtype=torch.float64)
        state = AdamState(params={"w": theta})
        adam_step(state, {"w": torch.ones((), dtype=torch.float64)}, lr=1e-3)
        expected = -1e-3 * 1.0 / (1.0 + 1e-8)
        assert float(theta) == pytest.approx(expected, abs=1e-15)
        assert state.t == 1

    def test_zero_gradient_identity(self):
        theta = torch.tensor([1.5, -2.0], dtype=torch.float64)
        state = AdamState(params={"w": theta})
        adam_step(state, {"w": torch.zeros(2, dtype=torch.float64)}, lr=1e-3)
        assert torch.equal(theta, torch.tensor([1.5, -2.0], dtype=torch.float64))

    def test_two_steps_match_hand_computation(self):
        g = 0.7
        lr = 1e-3
        b1, b2, eps = 0.9, 0.999, 1e-8
        theta = torch.zeros((), dtype=torch.float64)
        state = AdamState(params={"w": theta})
        # hand-evaluated reference sequence
        m = v = 0.0
        ref = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            ref -= lr * m_hat / (math.sqrt(v_hat) + eps)
            adam_step(state, {"w": torch.full((), g, dtype=torch.float64)}, lr)
        assert abs(float(theta) - ref) < 1e-12
        assert state.t == 2

    def test_matches_torch_adam(self):
        # same trajectory as torch.optim.Adam on a small quadratic
        torch.manual_seed(0)
        w1 = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        w2 = w1.detach().clone().requires_grad_(True)
        opt = torch.optim.Adam([w1], lr=1e-2)
        state = AdamState(params={"w": w2})
        x = torch.randn(5, 3, dtype=torch.float64)
        for _ in range(5):
            loss1 = ((x @ w1.t()) ** 2).sum()
            opt.zero_grad()
            loss1.backward()
            opt.step()
            loss2 = ((x @ w2.t()) ** 2).sum()
            if w2.grad is not None:
                w2.grad = None
            loss2.backward()
            adam_step(state, {"w": w2.grad}, lr=1e-2)
        assert torch.allclose(w1, w2, atol=1e-12)

    def test_shape_mismatch_error(self):
        state = AdamState(params={"w": torch.zeros(3)})
        with pytest.raises(ValueError, match="shape"):
            adam_step(state, {"w": torch.zeros(2)}, lr=1e-3)


# --- config ---------------------------------------------------------------

class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(model_kind="cnncap", task="total", batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(model_kind="cnncap", task="total", lr=0.0)
        with pytest.raises(ValueError, match="unknown loss"):
            TrainConfig(model_kind="cnncap", task="total", loss="mae")


# --- splitting ---------------------------------------------------------------

class TestSplitDataset:
    def _dataset(self, n_structures=40):
        samples = []
        for i in range(n_structures):
            sid = f"S{i:03d}"
            samples.append(_sample(sid, 1.0 + i, seed=i))
            samples.append(_sample(sid, 0.1 + i, task=TASK_COUPLING,
                                   env_id=1, seed=100 + i))
        return EncodedDataset(L=L, samples=samples)

    def test_partition_and_sizes(self):
        ds = self._dataset(40)
        tr, te = split_dataset(ds, 0.9, seed=7)
        assert isinstance(tr, EncodedDataset) and isinstance(te, EncodedDataset)
        tr_ids = {s.structure_id for s in tr.samples}
        te_ids = {s.structure_id for s in te.samples}
        assert len(tr_ids) == 36 and len(te_ids) == 4
        assert tr_ids.isdisjoint(te_ids)
        assert len(tr.samples) + len(te.samples) == len(ds.samples)

    def test_structure_level(self):
        ds = self._dataset(30)
        tr, te = split_dataset(ds, 0.8, seed=3)
        for side in (tr, te):
            for s in side.samples:
                mates = [m for m in ds.samples if m.structure_id == s.structure_id]
                assert all(any(m is t for t in side.samples) for m in mates)

    def test_deterministic_in_seed(self):
        ds = self._dataset(25)
        a1, b1 = split_dataset(ds, 0.9, seed=11)
        a2, b2 = split_dataset(ds, 0.9, seed=11)
        assert [s.structure_id for s in a1.samples] == [s.structure_id for s in a2.samples]
        assert [s.structure_id for s in b1.samples] == [s.structure_id for s in b2.samples]
        a3, _ = split_dataset(ds, 0.9, seed=12)
        assert [s.structure_id for s in a1.samples] != [s.structure_id for s in a3.samples]

    def test_bad_fraction_and_empty_side(self):
        ds = self._dataset(5)
        with pytest.raises(ValueError, match="train_fraction"):
            split_dataset(ds, 1.0, seed=0)
        with pytest.raises(ValueError, match="empty side"):
            split_dataset(ds, 0.05, seed=0)   # floor -> 0 train structures

    def test_plain_list_input(self):
        samples = [_sample(f"S{i}", 1.0 + i, seed=i) for i in range(10)]
        tr, te = split_dataset(samples, 0.8, seed=0)
        assert isinstance(tr, list) and isinstance(te, list)
        assert len(tr) == 8 and len(te) == 2


# --- training loop -----------------------------------------------------------

class TestTrain:
    def test_overfit_tiny_set(self):
        ds = _toy_dataset(12, seed=0)
        model = models.build_cnncap(TINY_CNN)
        config = TrainConfig(model_kind="cnncap", task="total", loss="msre",
                             batch_size=16, lr=1e-3, epochs=500, patience=500,
                             seed=0, normalize="mean", val_fraction=0.1)
        bundle, history = train(model, ds, config)
        assert min(h["train_loss"] for h in history) < 1e-3

    def test_metadata_and_best_checkpoint(self):
        ds = _toy_dataset(20, seed=1)
        model = models.build_cnncap(TINY_CNN)
        config = TrainConfig(model_kind="cnncap", task="total", batch_size=8,
                             lr=1e-3, epochs=8, patience=20, seed=4)
        bundle, history = train(model, ds, config)
        md = bundle.metadata
        assert md["train_config"]["seed"] == 4
        assert md["dataset_fingerprint"] == ds.fingerprint()
        best = min(history, key=lambda h: h["val_err_avg"])
        assert md["best_epoch"] == best["epoch"]
        assert md["best_val_err_avg"] == pytest.approx(best["val_err_avg"])

    def test_same_seed_identical_history_and_weights(self):
        ds = _toy_dataset(15, seed=2)
        config = TrainConfig(model_kind="cnncap", task="total", batch_size=8,
                             lr=1e-3, epochs=4, patience=10, seed=9)
        b1, h1 = train(models.build_cnncap(TINY_CNN), ds, config)
        b2, h2 = train(models.build_cnncap(TINY_CNN), ds, config)
        assert h1 == h2
        assert b1.state.keys() == b2.state.keys()
        assert all(np.array_equal(b1.state[k], b2.state[k]) for k in b1.state)

    def test_nan_loss_aborts_with_location(self):
        ds = _toy_dataset(15, seed=3)
        model = models.build_cnncap(TINY_CNN)
        config = TrainConfig(model_kind="cnncap", task="total", batch_size=8,
                             lr=1e-3, epochs=4, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.fill_(float("nan"))
        with pytest.raises(RuntimeError, match="epoch 0, batch 0"):
            train(model, ds, config)

    def test_empty_task_error(self):
        ds = _toy_dataset(10, seed=4)   # totals only
        config = TrainConfig(model_kind="cnncap", task="coupling", seed=0)
        with pytest.raises(ValueError, match="empty"):
            train(models.build_cnncap(TINY_CNN), ds, config)

    def test_predict_denormalizes_with_target_scale(self):
        ds = _toy_dataset(20, seed=5)
        model = models.build_cnncap(TINY_CNN)
        config = TrainConfig(model_kind="cnncap", task="total", batch_size=16,
                             lr=1e-3, epochs=60, patience=60, seed=1)
        bundle, _ = train(model, ds, config)
        scale = bundle.metadata["target_scale"]
        assert scale == pytest.approx(
            np.mean([s.target for s in ds.samples]), rel=0.15)
        x = trainer._features_array(ds.samples, "cnncap")
        preds = predict(bundle, x)
        raw = trainer.predict_array(models.model_from_bundle(bundle),
                                    x.astype(np.float32))
        assert np.allclose(preds, raw * scale)
        # trained model should be within a loose band of the labels
        y = np.array([s.target for s in ds.samples])
        assert np.abs(preds - y).mean() / y.mean() < 0.25


# --- grid search ------------------------------------------------------------

class TestGridSearch:
    def test_rejects_out_of_range_grids(self):
        ds = _toy_dataset(10)
        base = TrainConfig(model_kind="cnncap", task="total", seed=0)
        builder = lambda: models.build_cnncap(TINY_CNN)
        with pytest.raises(ValueError, match="learning rate"):
            grid_search(ds, [0.1], [64], base, builder)
        with pytest.raises(ValueError, match="batch size"):
            grid_search(ds, [1e-4], [48], base, builder)

    def test_paper_defaults_inside_ranges(self):
        assert trainer.LR_RANGE[0] <= 1e-4 <= trainer.LR_RANGE[1]
        assert trainer.LR_RANGE[0] <= 1e-5 <= trainer.LR_RANGE[1]
        assert 64 in trainer.GRID_BATCH_SIZES
        assert 32 in trainer.GRID_BATCH_SIZES

    def test_single_point_grid_returns_that_point(self):
        ds = _toy_dataset(15, seed=6)
        base = TrainConfig(model_kind="cnncap", task="total", seed=0,
                           epochs=50, patience=50)
        best, log = grid_search(ds, [1e-3], [16], base,
                                lambda: models.build_cnncap(TINY_CNN), epochs=2)
        assert best.lr == 1e-3 and best.batch_size == 16 and best.epochs == 2
        assert len(log) == 1
        assert log[0]["epochs_run"] == 2

    def test_selects_lowest_validation_error(self):
        ds = _toy_dataset(15, seed=7)
        base = TrainConfig(model_kind="cnncap", task="total", seed=0)
        best, log = grid_search(ds, [1e-3, 1e-5], [16], base,
                                lambda: models.build_cnncap(TINY_CNN), epochs=3)
        assert len(log) == 2
        winner = min(log, key=lambda e: e["val_err_avg"])
        assert best.lr == winner["lr"] and best.batch_size == winner["batch_size"]


# --- history persistence ------------------------------------------------------

class TestSaveHistory:
    def test_round_trip_text(self, tmp_path):
        history = [
            {"epoch": 0, "train_loss": 0.5, "val_err_avg": 0.125,
             "val_err_max": 0.5, "lr": 1e-4},
            {"epoch": 1, "train_loss": 0.25, "val_err_avg": 0.1,
             "val_err_max": 0.4, "lr": 1e-4},
        ]
        path = tmp_path / "h.history"
        save_history(history, path)
        lines = path.read_text().splitlines()
        assert lines[0].split() == ["epoch", "train_loss", "val_err_avg",
                                    "val_err_max", "lr"]
        assert len(lines) == 3
        cols = lines[2].split()
        assert int(cols[0]) == 1
        assert float(cols[1]) == 0.25
        assert float(cols[2]) == 0.1
