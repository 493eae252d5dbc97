"""Build (and cache) the desk-scale end-to-end artifacts used by the
acceptance tests: a 55 nm layer triple, 3,000 Pattern-B structures, golden
field-solver labels, an L=256 encoded dataset with a 90/10 structure-level
split, and three trained regressors (CNN total, CNN coupling, Grid+MLP
coupling) plus their test-split error reports.

Run directly to (re)build everything; each stage is skipped when its
artifact already exists, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cnncap import evalkit, fieldsolver, gridrep, models, patgen, trainer
from cnncap.techmodel import bundled_tech_path, load_techfile

CACHE = Path(__file__).resolve().parent.parent / ".desk_cache"
TRIPLE = (2, 3, 4)
N_STRUCTURES = 3000
L = 256
SPLIT_SEED = 42
TRAIN_FRACTION = 0.9
MAX_EPOCHS = 50


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def ensure_structures(tech) -> list[patgen.Structure2D]:
    path = CACHE / "structures.txt"
    if path.exists():
        return patgen.load_structures(path)
    log(f"generating {N_STRUCTURES} Pattern-B structures")
    structures = [
        patgen.generate_pattern_b(tech, TRIPLE, seed, structure_id=f"B-{seed:06d}")
        for seed in range(N_STRUCTURES)
    ]
    patgen.save_structures(structures, path, header="desk-scale Pattern-B corpus")
    return structures


def ensure_labels(tech, structures) -> dict[str, dict]:
    path = CACHE / "labels.txt"
    partial = CACHE / "labels.partial.txt"
    if path.exists():
        return fieldsolver.load_labels(path)
    done = set(fieldsolver.load_labels(partial)) if partial.exists() else set()
    todo = [s for s in structures if s.id not in done]
    log(f"solving {len(todo)} structures ({len(done)} cached)")
    t0 = time.perf_counter()
    with partial.open("a", encoding="utf-8") as fh:
        for k, s in enumerate(todo):
            result = fieldsolver.extract_capacitances(tech, s)
            fh.write("\n".join(fieldsolver.labels_to_rows(result)) + "\n")
            if (k + 1) % 50 == 0:
                fh.flush()
                rate = (time.perf_counter() - t0) / (k + 1)
                log(f"  {k + 1}/{len(todo)} solved ({rate:.2f} s/structure)")
    partial.rename(path)
    return fieldsolver.load_labels(path)


def ensure_dataset(tech, structures, labels) -> gridrep.EncodedDataset:
    path = CACHE / f"dataset_L{L}.bin"
    if path.exists():
        return gridrep.load_dataset(path)
    log(f"encoding L={L} dataset")
    dataset = gridrep.encode_structures(tech, structures, labels, L)
    gridrep.save_dataset(dataset, path)
    return dataset


def split(dataset):
    return trainer.split_dataset(dataset, TRAIN_FRACTION, seed=SPLIT_SEED)


def ensure_model(name: str, train_set, config: trainer.TrainConfig):
    path = CACHE / f"{name}.weights"
    if path.exists():
        return models.load_weights(path)
    log(f"training {name}: {config}")
    if config.model_kind == "cnncap":
        model = models.build_cnncap(
            models.CnnCapConfig(input_length=L), seed=config.seed)
    else:
        model = models.build_mlp(
            models.MlpConfig(input_dim=3 * L, output_dim=1), seed=config.seed)
    bundle, history = trainer.train(model, train_set, config)
    models.save_weights(bundle, path)
    trainer.save_history(history, CACHE / f"{name}.history")
    log(f"  {name}: best epoch {bundle.metadata['best_epoch']} "
        f"val_err_avg {bundle.metadata['best_val_err_avg']:.4f}")
    return bundle


def evaluate(bundle, test_set, task: str) -> evalkit.ErrorReport:
    samples = trainer.task_samples(test_set, task)
    x = trainer._features_array(samples, bundle.kind)
    y = np.array([s.target for s in samples])
    preds = trainer.predict(bundle, x)
    return evalkit.summarize(preds, y, task=task)


def build_all() -> dict:
    CACHE.mkdir(exist_ok=True)
    tech = load_techfile(bundled_tech_path("tech55"))
    structures = ensure_structures(tech)
    labels = ensure_labels(tech, structures)
    dataset = ensure_dataset(tech, structures, labels)
    train_set, test_set = split(dataset)
    log(f"dataset: {len(dataset.samples)} samples "
        f"({len(train_set.samples)} train, {len(test_set.samples)} test)")

    cnn_total = ensure_model("cnn_total", train_set, trainer.TrainConfig(
        model_kind="cnncap", task="total", loss="mse", batch_size=64,
        lr=1e-4, epochs=MAX_EPOCHS, patience=10, seed=0, normalize="mean"))
    cnn_coupling = ensure_model("cnn_coupling", train_set, trainer.TrainConfig(
        model_kind="cnncap", task="coupling", loss="msre", batch_size=64,
        lr=1e-4, epochs=MAX_EPOCHS, patience=10, seed=0, normalize="none"))
    gridmlp_coupling = ensure_model("gridmlp_coupling", train_set, trainer.TrainConfig(
        model_kind="gridmlp", task="coupling", loss="mse", batch_size=32,
        lr=1e-4, epochs=MAX_EPOCHS, patience=10, seed=0, normalize="mean"))

    metrics_path = CACHE / "metrics.json"
    if metrics_path.exists():
        return json.loads(metrics_path.read_text())
    metrics = {}
    for name, bundle, task in (("cnn_total", cnn_total, "total"),
                               ("cnn_coupling", cnn_coupling, "coupling"),
                               ("gridmlp_coupling", gridmlp_coupling, "coupling")):
        report = evaluate(bundle, test_set, task)
        evalkit.save_report(report, CACHE / f"{name}.report")
        metrics[name] = {"count": report.count, "err_avg": report.err_avg,
                         "err_max": report.err_max,
                         "ratio_over_5pct": report.ratio_over_5pct,
                         "ratio_over_10pct": report.ratio_over_10pct}
        log(f"{name}: n={report.count} err_avg={report.err_avg:.4f} "
            f"err_max={report.err_max:.4f}")
    metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics


if __name__ == "__main__":
    build_all()
    log("desk artifacts complete")
