"""Losses, Adam, dataset splitting, training loops, and grid search."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from . import models
from .gridrep import EncodedDataset, GridSample, TASK_TOTAL, TASK_COUPLING

GRID_BATCH_SIZES = (16, 32, 64, 128)
LR_RANGE = (1e-5, 1e-2)


@dataclass(frozen=True)
class TrainConfig:
    model_kind: str            # "cnncap" | "mlpcap" | "gridmlp"
    task: str                  # "total" | "coupling" | "vector"
    loss: str = "mse"          # "mse" | "msre"
    batch_size: int = 64
    lr: float = 1e-4
    epochs: int = 100
    patience: int = 15
    seed: int = 0
    normalize: str = "mean"    # "mean" | "none"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.loss not in ("mse", "msre"):
            raise ValueError(f"unknown loss '{self.loss}'")


@dataclass
class MlpSample:
    """One Pattern-B datum for the 9-parameter MLP baseline."""
    features: np.ndarray   # (9,)
    targets: np.ndarray    # (5,): total + couplings of env conductors 1..4
    structure_id: str


# --- losses --------------------------------------------------------------

def loss_mse(preds, labels):
    """Mean over samples of the squared (vector) error."""
    p, y = _pair(preds, labels)
    sq = (p - y) ** 2
    if sq.dim() > 1:
        sq = sq.sum(dim=tuple(range(1, sq.dim())))
    return sq.mean()


def loss_msre(preds, labels):
    """Mean squared relative error: mean of (1 - pred/label)^2 elementwise."""
    p, y = _pair(preds, labels)
    if bool((y == 0).any()):
        raise ValueError("loss_msre requires nonzero labels")
    sq = (1.0 - p / y) ** 2
    if sq.dim() > 1:
        sq = sq.sum(dim=tuple(range(1, sq.dim())))
    return sq.mean()


def loss_fn(kind: str):
    try:
        return {"mse": loss_mse, "msre": loss_msre}[kind]
    except KeyError:
        raise ValueError(f"unknown loss '{kind}'") from None


def _pair(preds, labels):
    p = preds if isinstance(preds, torch.Tensor) else torch.as_tensor(
        np.asarray(preds, dtype=float))
    y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(
        np.asarray(labels, dtype=float), dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {tuple(p.shape)} != label shape {tuple(y.shape)}")
    if p.numel() == 0:
        raise ValueError("empty prediction/label arrays")
    return p, y


# --- Adam ----------------------------------------------------------------

@dataclass
class AdamState:
    params: dict[str, torch.Tensor]
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, torch.zeros_like(p))
            self.v.setdefault(name, torch.zeros_like(p))


def adam_step(state: AdamState, grads: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on state.params."""
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in state.params.items():
            g = grads[name]
            if not isinstance(g, torch.Tensor):
                g = torch.as_tensor(np.asarray(g), dtype=p.dtype)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter "
                                 f"shape {tuple(p.shape)} for '{name}'")
            m = state.m[name]
            v = state.v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return state


# --- dataset handling ------------------------------------------------------

def _structure_ids(samples) -> list[str]:
    seen: dict[str, None] = {}
    for s in samples:
        seen.setdefault(s.structure_id, None)
    return list(seen)


def split_dataset(dataset, train_fraction: float, seed: int):
    """Structure-level split: all samples of one structure land on one side."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    samples = dataset.samples if isinstance(dataset, EncodedDataset) else list(dataset)
    ids = _structure_ids(samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_train = int(math.floor(train_fraction * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise ValueError(f"split leaves an empty side ({n_train}/{len(ids)} structures)")
    train_ids = {ids[i] for i in order[:n_train]}
    train = [s for s in samples if s.structure_id in train_ids]
    test = [s for s in samples if s.structure_id not in train_ids]
    if isinstance(dataset, EncodedDataset):
        return (EncodedDataset(L=dataset.L, samples=train),
                EncodedDataset(L=dataset.L, samples=test))
    return train, test


def task_samples(dataset, task: str) -> list[GridSample]:
    samples = dataset.samples if isinstance(dataset, EncodedDataset) else dataset
    want = TASK_TOTAL if task == "total" else TASK_COUPLING
    return [s for s in samples if s.feature.task == want]


def _features_array(samples, model_kind: str) -> np.ndarray:
    if model_kind == "mlpcap":
        return np.stack([s.features for s in samples]).astype(np.float32)
    rows = [s.feature.values for s in samples]
    x = np.stack(rows).astype(np.float32)
    if model_kind == "gridmlp":
        x = x.reshape(len(samples), -1)
    return x


def _targets_array(samples, model_kind: str) -> np.ndarray:
    if model_kind == "mlpcap":
        return np.stack([s.targets for s in samples]).astype(np.float64)
    return np.array([s.target for s in samples], dtype=np.float64)


# --- training loop ---------------------------------------------------------

def _eval_errors(model, x: np.ndarray, y: np.ndarray, scale,
                 batch_size: int = 256) -> np.ndarray:
    preds = predict_array(model, x, batch_size) * scale
    return np.abs(preds - y) / np.abs(y)


def predict_array(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference over a feature matrix, in normalized target units."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(models.forward(model, x[i:i + batch_size]).numpy())
    pred = np.concatenate(out)
    return pred.astype(np.float64)


def train(model, dataset, config: TrainConfig):
    """Train `model` on `dataset`, returning (best ModelBundle, history).

    `dataset` is an EncodedDataset / GridSample list (cnncap, gridmlp) or
    an MlpSample list (mlpcap).  A structure-level validation split
    (config.val_fraction of the input) drives early stopping; the returned
    bundle is the best-validation checkpoint.
    """
    torch.manual_seed(config.seed)
    if config.model_kind in ("cnncap", "gridmlp"):
        samples = task_samples(dataset, config.task)
    else:
        samples = dataset.samples if isinstance(dataset, EncodedDataset) else list(dataset)
    if not samples:
        raise ValueError("empty training dataset")

    train_s, val_s = split_dataset(samples, 1.0 - config.val_fraction,
                                   seed=config.seed + 1)
    x_train = _features_array(train_s, config.model_kind)
    y_train = _targets_array(train_s, config.model_kind)
    x_val = _features_array(val_s, config.model_kind)
    y_val = _targets_array(val_s, config.model_kind)

    if config.normalize == "mean":
        scale = y_train.mean(axis=0)
    else:
        scale = np.ones(y_train.shape[1:]) if y_train.ndim > 1 else 1.0
    y_norm = y_train / scale

    criterion = loss_fn(config.loss)
    params = dict(model.named_parameters())
    state = AdamState(params=params)
    rng = np.random.default_rng(config.seed)

    history = []
    best = {"err": np.inf, "state": None, "epoch": -1}
    stale = 0
    n = len(train_s)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        model.train()
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = torch.as_tensor(x_train[idx])
            yb = torch.as_tensor(y_norm[idx], dtype=torch.float32)
            preds = model(xb)
            loss = criterion(preds, yb)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            adam_step(state, grads, config.lr)
            epoch_loss += float(loss.detach()) * len(idx)
        epoch_loss /= n

        val_errors = _eval_errors(model, x_val, y_val, scale)
        entry = {"epoch": epoch, "train_loss": epoch_loss,
                 "val_err_avg": float(val_errors.mean()),
                 "val_err_max": float(val_errors.max()), "lr": config.lr}
        history.append(entry)
        if entry["val_err_avg"] < best["err"]:
            best = {"err": entry["val_err_avg"],
                    "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
                    "epoch": epoch}
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    if best["state"] is not None:
        model.load_state_dict(best["state"])
    fingerprint = dataset.fingerprint() if isinstance(dataset, EncodedDataset) else ""
    metadata = {
        "train_config": asdict(config),
        "target_scale": scale.tolist() if isinstance(scale, np.ndarray) else float(scale),
        "best_epoch": best["epoch"],
        "best_val_err_avg": float(best["err"]),
        "dataset_fingerprint": fingerprint,
        "n_train_samples": n,
    }
    bundle = models.bundle_from_model(model, config.model_kind, metadata)
    return bundle, history


def predict(bundle_or_model, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predictions in fF/µm (denormalized via the bundle's target scale)."""
    if isinstance(bundle_or_model, models.ModelBundle):
        model = models.model_from_bundle(bundle_or_model)
        scale = np.asarray(bundle_or_model.metadata.get("target_scale", 1.0))
    else:
        model = bundle_or_model
        scale = np.asarray(1.0)
    return predict_array(model, np.asarray(features, dtype=np.float32),
                         batch_size) * scale


def grid_search(dataset, lr_grid, batch_grid, base_config: TrainConfig,
                model_builder, epochs: int | None = None):
    """Train each (lr, batch) cell with a reduced budget; lowest validation
    Err_avg wins.  Returns (best TrainConfig, log list)."""
    for lr in lr_grid:
        if not LR_RANGE[0] <= lr <= LR_RANGE[1]:
            raise ValueError(f"learning rate {lr} outside {LR_RANGE}")
    for b in batch_grid:
        if b not in GRID_BATCH_SIZES:
            raise ValueError(f"batch size {b} not in {GRID_BATCH_SIZES}")
    log = []
    best_config = None
    best_err = np.inf
    for lr in lr_grid:
        for batch in batch_grid:
            config = replace(base_config, lr=lr, batch_size=batch,
                             epochs=epochs or base_config.epochs)
            model = model_builder()
            bundle, history = train(model, dataset, config)
            err = bundle.metadata["best_val_err_avg"]
            log.append({"lr": lr, "batch_size": batch, "val_err_avg": err,
                        "epochs_run": len(history)})
            if err < best_err:
                best_err = err
                best_config = config
    return best_config, log


def save_history(history: list[dict], path) -> None:
    from pathlib import Path
    lines = ["epoch train_loss val_err_avg val_err_max lr"]
    for h in history:
        lines.append(f"{h['epoch']} {h['train_loss']!r} {h['val_err_avg']!r} "
                     f"{h['val_err_max']!r} {h['lr']!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
