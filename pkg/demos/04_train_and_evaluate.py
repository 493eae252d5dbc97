"""Train a small capacitance regressor end to end and evaluate it.

A miniature version of the production flow: generate structures, solve for
golden labels, encode a dataset, split at the structure level, train with
the in-repo Adam loop, and report relative-error metrics. Scaled down
(40 structures, coarse solver grid, reduced CNN) so it runs in about a
minute; the real flow uses thousands of structures and the full network.
"""

import numpy as np

from cnncap import evalkit, fieldsolver, gridrep, models, patgen, techmodel, trainer

tech = techmodel.load_techfile(techmodel.bundled_tech_path("tech55"))

print("generating and solving 40 structures...")
structures = [patgen.generate_pattern_b(tech, (2, 3, 4), k,
                                        structure_id=f"D-{k:03d}")
              for k in range(40)]
labels = {}
for s in structures:
    r = fieldsolver.extract_capacitances(tech, s, resolution=2)
    labels[s.id] = {"total": r.total, "couplings": r.couplings,
                    "ground": r.ground_coupling}

dataset = gridrep.encode_structures(tech, structures, labels, 64)
train_set, test_set = trainer.split_dataset(dataset, 0.8, seed=42)
print(f"dataset: {len(train_set.samples)} train / "
      f"{len(test_set.samples)} test samples")

model = models.build_cnncap(models.CnnCapConfig(
    input_length=64, block_counts=(1, 1, 1, 1), channels=(8, 16, 32, 64)),
    seed=0)
config = trainer.TrainConfig(model_kind="cnncap", task="total", loss="mse",
                             batch_size=16, lr=1e-3, epochs=30, patience=30,
                             seed=0)
bundle, history = trainer.train(model, train_set, config)
print(f"trained {len(history)} epochs; best validation err_avg "
      f"{bundle.metadata['best_val_err_avg']:.3f} "
      f"at epoch {bundle.metadata['best_epoch']}")

samples = trainer.task_samples(test_set, "total")
preds = trainer.predict(bundle, trainer._features_array(samples, "cnncap"))
report = evalkit.summarize(preds, np.array([s.target for s in samples]),
                           task="total")
print(f"test: n={report.count} err_avg={report.err_avg:.3f} "
      f"err_max={report.err_max:.3f} ratio>10%={report.ratio_over_10pct:.2f}")

bench = evalkit.bench_inference(models.model_from_bundle(bundle), test_set,
                                repeats=3)
print(f"inference: {bench.median_ms_per_structure:.2f} ms/structure "
      f"({bench.evals_per_structure:.1f} evaluations each)")
