"""Command-line pipeline: generate, solve, encode, train, predict, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every produced artifact embeds (or sits next to, for binary formats) the
resolved configuration of the command that made it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import assembly25d, evalkit, fieldsolver, gridrep, models, patgen, techmodel, trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# task -> (loss, batch, lr) defaults; coupling uses the relative-error loss
_TASK_DEFAULTS = {
    ("cnncap", "total"): ("mse", 64, 1e-4),
    ("cnncap", "coupling"): ("msre", 64, 1e-5),
    ("gridmlp", "total"): ("mse", 32, 1e-5),
    ("gridmlp", "coupling"): ("mse", 32, 1e-5),
    ("mlpcap", "vector"): ("mse", 32, 1e-5),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _resolved_config(args: argparse.Namespace) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return f"config: {json.dumps(resolved, default=str, sort_keys=True)}"


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise _UsageError(f"--layers expects k,j,i integers, got '{text}'")
    return tuple(int(p) for p in parts)


def _cmd_tech(args) -> int:
    tech = techmodel.load_techfile(args.tech)
    print(f"tech '{tech.name}': {len(tech.layers)} layers, "
          f"{len(tech.dielectrics)} dielectric slabs, z_max {tech.z_max:g} µm")
    for layer in tech.layers:
        print(f"  layer {layer.index}: window {techmodel.window_width(tech, layer.index):g} µm")
    if args.resave:
        techmodel.save_techfile(tech, args.resave)
    return EXIT_OK


def _cmd_patgen(args) -> int:
    tech = techmodel.load_techfile(args.tech)
    triple = _parse_triple(args.layers)
    structures = []
    for k in range(args.count):
        sid = f"{args.pattern}{triple[0]}-{triple[1]}-{triple[2]}-{args.seed}-{k:06d}"
        structures.append(patgen.generate(tech, args.pattern, triple,
                                          rng_seed=args.seed + k, structure_id=sid))
    patgen.save_structures(structures, args.out, header=_resolved_config(args))
    print(f"wrote {len(structures)} pattern-{args.pattern} structures to {args.out}")
    return EXIT_OK


def _solve_one(packed):
    tech, structure, resolution, tol = packed
    return fieldsolver.extract_capacitances(tech, structure, resolution, tol)


def _cmd_solve(args) -> int:
    tech = techmodel.load_techfile(args.tech)
    structures = patgen.load_structures(args.structures)
    jobs = [(tech, s, args.resolution, args.tol) for s in structures]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_solve_one, jobs, chunksize=4))
    else:
        results = [_solve_one(j) for j in jobs]
    fieldsolver.save_labels(results, args.out, header=_resolved_config(args))
    seconds = sum(r.solve_seconds for r in results)
    print(f"solved {len(results)} structures in {seconds:.1f} s "
          f"({seconds / max(len(results), 1):.2f} s/structure) -> {args.out}")
    return EXIT_OK


def _cmd_encode(args) -> int:
    tech = techmodel.load_techfile(args.tech)
    structures = patgen.load_structures(args.infile)
    labels = fieldsolver.load_labels(args.labels)
    dataset = gridrep.encode_structures(tech, structures, labels, args.L,
                                        filter_ratio=args.filter_ratio)
    gridrep.save_dataset(dataset, args.out)
    Path(str(args.out) + ".meta.json").write_text(json.dumps({
        "config": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "fingerprint": dataset.fingerprint(),
        "n_samples": len(dataset.samples),
    }, default=str, sort_keys=True, indent=1) + "\n")
    n_total = sum(1 for s in dataset.samples if s.feature.task == gridrep.TASK_TOTAL)
    print(f"encoded {len(dataset.samples)} samples ({n_total} total, "
          f"{len(dataset.samples) - n_total} coupling) at L={args.L} -> {args.out}")
    return EXIT_OK


def _mlp_samples(tech, structures, labels) -> list[trainer.MlpSample]:
    out = []
    for s in structures:
        entry = labels[s.id]
        targets = np.array([entry["total"]] +
                           [entry["couplings"][i] for i in range(1, 5)])
        out.append(trainer.MlpSample(
            features=gridrep.mlp_feature_pattern_b(s), targets=targets,
            structure_id=s.id))
    return out


def _cmd_train(args) -> int:
    loss, batch, lr = _TASK_DEFAULTS[(args.model, args.task)]
    config = trainer.TrainConfig(
        model_kind=args.model, task=args.task,
        loss=args.loss or loss,
        batch_size=args.batch or batch,
        lr=args.lr or lr,
        epochs=args.epochs, patience=args.patience, seed=args.seed,
        normalize="none" if (args.loss or loss) == "msre" else "mean")

    if args.model == "mlpcap":
        if not (args.structures and args.labels):
            raise _UsageError("--model mlpcap requires --structures and --labels")
        tech = techmodel.load_techfile(args.tech)
        structures = patgen.load_structures(args.structures)
        labels = fieldsolver.load_labels(args.labels)
        dataset = _mlp_samples(tech, structures, labels)
        model = models.build_mlp(models.MlpConfig(input_dim=9, output_dim=5),
                                 seed=args.seed)
    else:
        dataset = gridrep.load_dataset(args.dataset)
        if args.model == "cnncap":
            model = models.build_cnncap(
                models.CnnCapConfig(input_length=dataset.L), seed=args.seed)
        else:
            model = models.build_mlp(
                models.MlpConfig(input_dim=3 * dataset.L, output_dim=1),
                seed=args.seed)

    bundle, history = trainer.train(model, dataset, config)
    bundle.metadata["cli_config"] = {k: v for k, v in sorted(vars(args).items())
                                     if k != "func"}
    models.save_weights(bundle, args.out)
    if args.history:
        trainer.save_history(history, args.history)
    print(f"trained {args.model}/{args.task}: best val err_avg "
          f"{bundle.metadata['best_val_err_avg']:.4f} at epoch "
          f"{bundle.metadata['best_epoch']} ({len(history)} epochs run) -> {args.out}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    bundle = models.load_weights(args.model)
    dataset = gridrep.load_dataset(args.dataset)
    task = bundle.metadata.get("train_config", {}).get("task", "total")
    samples = trainer.task_samples(dataset, task)
    if not samples:
        raise ValueError(f"dataset has no '{task}' samples")
    x = trainer._features_array(samples, bundle.kind)
    preds = trainer.predict(bundle, x)
    lines = [f"# {_resolved_config(args)}",
             "structure_id,env_id,label,prediction"]
    for s, p in zip(samples, preds):
        env = "" if s.env_id is None else s.env_id
        lines.append(f"{s.structure_id},{env},{float(s.target)!r},{float(p)!r}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(preds)} predictions ({task}) -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    labels, preds = [], []
    for line in Path(args.pred).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("structure_id"):
            continue
        _, _, label, pred = line.split(",")
        labels.append(float(label))
        preds.append(float(pred))
    report = evalkit.summarize(preds, labels, task=args.task)
    evalkit.save_report(report, args.out)
    if args.scatter:
        evalkit.scatter_export(report, args.scatter)
    print(f"{args.task or 'report'}: n={report.count} err_avg={report.err_avg:.4f} "
          f"err_max={report.err_max:.4f} ratio>5%={report.ratio_over_5pct:.4f} "
          f"ratio>10%={report.ratio_over_10pct:.4f}")
    return EXIT_OK


def _parse_caps(text: str) -> assembly25d.CrossSectionCaps:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise _UsageError(f"expected fringe_left,overlap,fringe_right, got '{text}'")
    return assembly25d.CrossSectionCaps(*parts)


def _cmd_assemble(args) -> int:
    value = assembly25d.assemble_crossover(
        _parse_caps(args.ca), _parse_caps(args.cb), args.w1, args.w2)
    print(f"{value!r}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    bundle = models.load_weights(args.model)
    model = models.model_from_bundle(bundle)
    dataset = gridrep.load_dataset(args.dataset)
    solver_s = None
    evals = None
    if args.structures:
        all_structures = patgen.load_structures(args.structures)
        # one total + one coupling evaluation per environmental conductor
        evals = sum(s.n_c for s in all_structures) / len(all_structures)
        if args.tech:
            tech = techmodel.load_techfile(args.tech)
            solver_s = evalkit.bench_solver(tech, all_structures[:args.solver_count],
                                            resolution=args.resolution)
    result = evalkit.bench_inference(model, dataset, repeats=args.repeats,
                                     batch_size=args.batch, model_kind=bundle.kind,
                                     evals_per_structure=evals,
                                     solver_seconds_per_structure=solver_s)
    print(f"inference: {result.mean_ms_per_structure:.3f} ms/structure mean, "
          f"{result.median_ms_per_structure:.3f} median "
          f"({result.evals_per_structure:.1f} evals/structure, "
          f"{result.threads} threads)")
    if result.speedup is not None:
        print(f"solver: {result.solver_ms_per_structure:.1f} ms/structure; "
              f"speedup {result.speedup:.0f}x")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cnncap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tech", help="validate a tech file")
    p.add_argument("action", choices=["validate"])
    p.add_argument("--tech", required=True)
    p.add_argument("--resave", default=None)
    p.set_defaults(func=_cmd_tech)

    p = sub.add_parser("patgen", help="generate random structures")
    p.add_argument("--tech", required=True)
    p.add_argument("--pattern", required=True, choices=["A", "B", "C"])
    p.add_argument("--layers", required=True, help="bottom,middle,top indices")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_patgen)

    p = sub.add_parser("solve", help="compute golden capacitance labels")
    p.add_argument("--tech", required=True)
    p.add_argument("--structures", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=fieldsolver.DEFAULT_RESOLUTION)
    p.add_argument("--tol", type=float, default=fieldsolver.DEFAULT_TOL)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("encode", help="encode structures+labels into a dataset")
    p.add_argument("--tech", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--L", type=int, default=1024)
    p.add_argument("--filter-ratio", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("train", help="train a capacitance model")
    p.add_argument("--model", required=True, choices=["cnncap", "gridmlp", "mlpcap"])
    p.add_argument("--task", default="total", choices=["total", "coupling", "vector"])
    p.add_argument("--dataset", default=None)
    p.add_argument("--tech", default=None)
    p.add_argument("--structures", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--loss", default=None, choices=["mse", "msre"])
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=15)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="run a trained model over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="error metrics from a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scatter", default=None)
    p.add_argument("--task", default="")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("assemble25d", help="2.5-D crossover assembly")
    p.add_argument("--ca", required=True, help="fringe_left,overlap,fringe_right fF/µm")
    p.add_argument("--cb", required=True, help="fringe_left,overlap,fringe_right fF/µm")
    p.add_argument("--w1", type=float, required=True)
    p.add_argument("--w2", type=float, required=True)
    p.set_defaults(func=_cmd_assemble)

    p = sub.add_parser("bench", help="inference / solver timing")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--tech", default=None)
    p.add_argument("--structures", default=None)
    p.add_argument("--solver-count", type=int, default=10)
    p.add_argument("--resolution", type=int, default=fieldsolver.DEFAULT_RESOLUTION)
    p.set_defaults(func=_cmd_bench)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except fieldsolver.SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (techmodel.TechFileError, patgen.GenerationError, gridrep.EncodingError,
            models.ModelIOError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
