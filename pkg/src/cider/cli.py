"""``cider`` command line: generate, train-task, explain, evaluate, bio-prep.

Every command writes ``config.json`` with its fully resolved arguments into
the output directory; ``--config that/config.json`` replays the run.
Exit codes: 0 success, 2 contract/config/parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .data import (
    aggregate_by_celltype,
    clean_matrix,
    correlation_network,
    generate_ba2motif,
    load_tu_dataset,
    read_annotation_csv,
    read_expression_csv,
)
from .diffusion import (
    DiffusionConfig,
    OBJECTIVES,
    UPDATE_MODES,
    causal_strength,
    explain_dataset,
    motif_precision,
    motif_recall,
    save_trace,
    train_cider,
)
from .errors import CiderError, ContractError, NumericError
from .gnn import PROPAGATIONS, TaskModel, TrainConfig, evaluate_accuracy, train_task_model
from .graph import Dataset, load_dataset, save_dataset, sparsity_k, split_dataset, top_k_edges
from .model import CiderParams
from .plotting import plot_loss_curve, plot_sparsity_curve

log = logging.getLogger("cider")

EXIT_OK, EXIT_CONTRACT, EXIT_NUMERIC = 0, 2, 3

# CIDER row of the published accuracy table, keyed by sparsity
REFERENCE_ACCURACY = {
    "MUTAG": {0.1: 0.640, 0.2: 0.640, 0.3: 0.672, 0.4: 0.674},
    "NCI1": {0.1: 0.676, 0.2: 0.680, 0.3: 0.692, 0.4: 0.688},
}
_REFERENCE_ALIASES = {"mutag": "MUTAG", "mutagenicity": "MUTAG", "nci1": "NCI1"}

TASK_FILE, CIDER_FILE, CONFIG_FILE = "task.json", "cider.json", "config.json"


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        writer.writerows(rows)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, args) -> None:
    doc = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    _write_json(out / CONFIG_FILE, doc)


def load_any_dataset(path, split_seed: int = 0) -> Dataset:
    """Native dataset directory, or a TU-format directory split on the fly."""
    path = Path(path)
    if not path.is_dir():
        raise ContractError(f"dataset directory {path} does not exist")
    if (path / "manifest.json").exists():
        ds = load_dataset(path)
    else:
        ds = load_tu_dataset(path)
    if not ds.splits:
        ds = split_dataset(ds, seed=split_seed)
    return ds


def _task_path(path) -> Path:
    path = Path(path)
    return path / TASK_FILE if path.is_dir() else path


def _cider_path(path) -> Path:
    path = Path(path)
    return path / CIDER_FILE if path.is_dir() else path


def cmd_generate(args) -> int:
    out = _out_dir(args)
    ds = generate_ba2motif(args.count, np.random.default_rng(args.seed),
                           base_n=args.base_n, base_m=args.base_m, feature_dim=args.feature_dim)
    save_dataset(ds, out)
    _echo_config(out, args)
    log.info("wrote %d graphs to %s", len(ds), out)
    return EXIT_OK


def cmd_train_task(args) -> int:
    ds = load_any_dataset(args.dataset, args.split_seed)
    cfg = TrainConfig(widths=tuple(args.widths), learning_rate=args.learning_rate,
                      weight_decay=args.weight_decay, batch_size=args.batch_size,
                      epochs=args.epochs, patience=args.patience, seed=args.seed,
                      propagation=args.propagation)
    out = _out_dir(args)

    def progress(epoch, loss, acc):
        log.info("epoch %d loss %.4f val acc %.4f", epoch, loss, acc)

    result = train_task_model(ds, cfg, on_epoch=progress)
    result.model.save(out / TASK_FILE)
    _write_json(out / "metrics.json", result.metrics())
    rows = [[i + 1, loss, acc] for i, (loss, acc) in
            enumerate(zip(result.epoch_loss, result.epoch_val_accuracy))]
    _write_csv(out / "train_log.csv", ["epoch", "loss", "val_accuracy"], rows)
    _echo_config(out, args)
    log.info("test accuracy %.4f", result.test_accuracy)
    return EXIT_OK


def _diffusion_config(args) -> DiffusionConfig:
    return DiffusionConfig(steps=args.steps, n_causal=args.nc, n_spurious=args.ns,
                           objective=args.objective, epochs=args.epochs,
                           batch_size=args.batch_size, learning_rate=args.learning_rate,
                           weight_decay=args.weight_decay, lambda_task=args.lambda_task,
                           update_mode=args.update_mode, hidden=args.hidden, latent=args.latent,
                           eval_draws=args.eval_draws, seed=args.seed)


def _check_compatible(task: TaskModel, ds: Dataset) -> None:
    if task.d != ds.d:
        raise ContractError(f"task model expects {task.d} features, dataset has {ds.d}")
    if task.classes != ds.class_count:
        raise ContractError(f"task model has {task.classes} classes, dataset has {ds.class_count}")


def cmd_explain(args) -> int:
    ds = load_any_dataset(args.dataset, args.split_seed)
    task = TaskModel.load(_task_path(args.task))
    _check_compatible(task, ds)
    cfg = _diffusion_config(args)
    out = _out_dir(args)
    params = CiderParams.init(ds.d, np.random.default_rng(cfg.seed), hidden=cfg.hidden,
                              h=cfg.latent, propagation=args.propagation)

    def progress(entry):
        log.info("epoch %d l1 %.4f kld %.4f recon %.4f task %.4f", entry.epoch,
                 entry.l1, entry.kld, entry.recon, entry.task)

    trained = train_cider(params, task, ds, cfg, limit=args.train_limit, on_epoch=progress)
    rows = [e.as_dict() for e in trained.log]
    header = ["epoch", "l1", "kld", "recon", "task", "total"]
    _write_csv(out / "loss.csv", header, [[r[h] for h in header] for r in rows])
    plot_loss_curve(rows, out / "loss.png")
    params.save(out / CIDER_FILE, extra={"diffusion": asdict(cfg), "epochs_run": len(rows)})

    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    idx = ds.splits["test"]
    untrained = cfg.epochs == 0
    for i, (result, trace) in zip(idx, explain_dataset(params, task, ds.subset("test"), cfg,
                                                       indices=idx, untrained=untrained)):
        save_trace(traces / f"graph_{i:05d}.json", trace, result)
    _echo_config(out, args)
    return EXIT_OK


def load_cider(path) -> tuple[CiderParams, DiffusionConfig, bool]:
    path = _cider_path(path)
    params = CiderParams.load(path)
    _, desc = ad.load_checkpoint(path)
    extra = desc.get("extra", {})
    cfg = DiffusionConfig(**extra.get("diffusion", {}))
    return params, cfg, extra.get("epochs_run", 0) == 0


def random_baseline(task: TaskModel, graphs, indices, ratios, reps: int, seed: int):
    """Accuracy of uniformly scored top-k subgraphs, per ratio: ``(mean, std)`` over reps."""
    acc = np.zeros((reps, len(ratios)))
    for r in range(reps):
        scores = []
        for g, idx in zip(graphs, indices):
            u = np.random.default_rng((seed, r, idx)).random(g.adj.shape)
            scores.append(np.triu(u, 1) + np.triu(u, 1).T)
        for j, ratio in enumerate(ratios):
            acc[r, j] = evaluate_accuracy(
                task, graphs, lambda i, g: top_k_edges(scores[i], g.adj, sparsity_k(ratio, g.num_edges)))
    return acc.mean(axis=0), acc.std(axis=0)


def reference_values(name: str) -> dict | None:
    key = _REFERENCE_ALIASES.get(name.lower())
    return None if key is None else {"dataset": key, "accuracy": REFERENCE_ACCURACY[key]}


def cmd_evaluate(args) -> int:
    ds = load_any_dataset(args.dataset, args.split_seed)
    task = TaskModel.load(_task_path(args.task))
    _check_compatible(task, ds)
    params, cfg, untrained = load_cider(args.cider)
    if params.d != ds.d:
        raise ContractError(f"CIDER checkpoint expects {params.d} features, dataset has {ds.d}")
    out = _out_dir(args)
    idx = ds.splits["test"]
    graphs = ds.subset("test")
    results = [r for r, _ in explain_dataset(params, task, graphs, cfg, indices=idx,
                                             untrained=untrained)]
    has_gt = args.gt_recovery and all(g.gt_mask is not None for g in graphs)
    if args.gt_recovery and not has_gt:
        log.warning("--gt-recovery ignored: some test graphs have no ground-truth mask")

    header = ["sparsity", "accuracy", "effect", "agreement"] + (["precision", "recall"] if has_gt else [])
    rows, records = [], []
    for ratio in args.sparsity:
        acc = evaluate_accuracy(task, graphs, lambda i, g: results[i].subgraph_at(ratio))
        stats = [causal_strength(task, g, results[i].subgraph_at(ratio), args.draws,
                                 np.random.default_rng((args.seed, idx[i], int(round(ratio * 1e6)))))
                 for i, g in enumerate(graphs)]
        effect = float(np.mean([s[0] for s in stats]))
        agreement = float(np.mean([s[1] for s in stats]))
        row = [ratio, acc, effect, agreement]
        if has_gt:
            ks = [sparsity_k(ratio, g.num_edges) for g in graphs]
            row += [float(np.mean([motif_precision(r.scores, g, k) for r, g, k in zip(results, graphs, ks)])),
                    float(np.mean([motif_recall(r.scores, g, k) for r, g, k in zip(results, graphs, ks)]))]
        rows.append(row)
        records.append(dict(zip(header, row)))
    _write_csv(out / "report.csv", header, rows)

    report = {
        "dataset": ds.name,
        "test_graphs": len(graphs),
        "untrained": untrained,
        "rows": records,
        "label_agreement": float(np.mean([r.label_agreement for r in results])),
        "causal_effect": float(np.mean([r.causal_effect for r in results])),
        "score_sparsity": float(np.mean([r.score_sparsity for r in results])),
    }
    if has_gt:
        report["recall_at_k"] = {"k": args.recall_k, "recall": float(np.mean(
            [motif_recall(r.scores, g, args.recall_k) for r, g in zip(results, graphs)]))}
    baseline_rows = None
    if args.baseline_reps > 0:
        mean, std = random_baseline(task, graphs, idx, args.sparsity, args.baseline_reps, args.seed)
        baseline_rows = [{"sparsity": s, "accuracy": float(m), "accuracy_std": float(sd)}
                         for s, m, sd in zip(args.sparsity, mean, std)]
        _write_csv(out / "baseline.csv", ["sparsity", "accuracy", "accuracy_std"],
                   [[b["sparsity"], b["accuracy"], b["accuracy_std"]] for b in baseline_rows])
        report["baseline"] = {"repetitions": args.baseline_reps, "rows": baseline_rows,
                              "margin": [rec["accuracy"] - b["accuracy"]
                                         for rec, b in zip(records, baseline_rows)]}
    ref = reference_values(ds.name)
    if ref is not None:
        report["reference"] = ref
    _write_json(out / "report.json", report)
    plot_sparsity_curve(records, out / "sparsity.png", baseline_rows)
    _echo_config(out, args)
    return EXIT_OK


def cmd_bio_prep(args) -> int:
    matrix = clean_matrix(read_expression_csv(args.expression))
    if args.annotation:
        matrix = aggregate_by_celltype(matrix, read_annotation_csv(args.annotation))
    graph = correlation_network(matrix, threshold=args.threshold, label=args.label)
    if graph.num_edges == 0:
        log.warning("no gene pair reaches |r| >= %s; the network has no edges", args.threshold)
    out = _out_dir(args)
    save_dataset(Dataset([graph], args.label + 1, name="bio"), out)
    (out / "genes.txt").write_text("\n".join(matrix.row_names) + "\n")
    _echo_config(out, args)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="replay a resolved config.json (explicit flags still win)")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cider", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a BA-2motif dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-n", type=int, default=20)
    p.add_argument("--base-m", type=int, default=1)
    p.add_argument("--feature-dim", type=int, default=10)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-task", help="train the GCN classifier to be explained")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--widths", type=_int_list, default=[20, 20, 20])
    p.add_argument("--propagation", choices=PROPAGATIONS, default="sum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0, help="split seed for TU directories")
    p.set_defaults(func=cmd_train_task)

    p = sub.add_parser("explain", help="train CIDER and write per-test-graph traces")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", required=True, help="train-task output directory or checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--nc", type=int, default=1)
    p.add_argument("--ns", type=int, default=4)
    p.add_argument("--objective", choices=OBJECTIVES, default="model")
    p.add_argument("--lambda-task", type=float, default=1.0)
    p.add_argument("--update-mode", choices=UPDATE_MODES, default="per-step")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--hidden", type=int, default=20)
    p.add_argument("--latent", type=int, default=16)
    p.add_argument("--propagation", choices=PROPAGATIONS, default="sum")
    p.add_argument("--eval-draws", type=int, default=16)
    p.add_argument("--train-limit", type=int, default=None,
                   help="train on the first N training graphs only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="accuracy, effect and agreement of top-k explanations")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--cider", required=True, help="explain output directory or checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--sparsity", type=_float_list, default=[0.1, 0.2, 0.3, 0.4])
    p.add_argument("--draws", type=int, default=16, help="interventions per graph and sparsity")
    p.add_argument("--gt-recovery", action="store_true", help="add motif precision and recall")
    p.add_argument("--recall-k", type=int, default=6)
    p.add_argument("--baseline-reps", type=int, default=0,
                   help="repetitions of the random top-k baseline (0 disables it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bio-prep", help="expression CSV to a correlation-network dataset")
    p.add_argument("--expression", required=True)
    p.add_argument("--annotation")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.6)
    p.add_argument("--label", type=int, default=0)
    p.set_defaults(func=cmd_bio_prep)

    for action in sub.choices.values():
        _add_common(action)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = parser._subparsers._group_actions[0].choices.get(known.command)
    if known.config and sub is not None:
        try:
            saved = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {known.config}: {exc}") from exc
        if saved.get("command") != known.command:
            raise ContractError(f"{known.config} is a {saved.get('command')!r} config, "
                                f"not {known.command!r}")
        known_dests = {a.dest for a in sub._actions}
        unknown = sorted(set(saved) - known_dests - {"command"})
        if unknown:
            raise ContractError(f"{known.config}: unknown keys {unknown}")
        sub.set_defaults(**{k: v for k, v in saved.items() if k != "command"})
        # replayed values satisfy required flags; explicit flags still override them
        for action in sub._actions:
            if action.dest in saved:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CiderError as exc:
        print(f"cider: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"cider: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CiderError, OSError) as exc:
        print(f"cider: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
