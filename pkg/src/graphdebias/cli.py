"""Command-line entry points: ``train``, ``eval``, ``analyze`` and ``gen-synthetic``.

Run directories default to ``$GRAPHDEBIAS_RUNS/<dataset>-<ablation>-seed<seed>``
(``./runs`` when the variable is unset). Errors exit nonzero and print one JSON
line ``{"error": <category>, "message": ...}`` on stderr.

Files written into a run directory:

    history.csv           round,stage,epoch,loss_rec,loss_inv,val_ndcg@K,pred_bias_<attr>...
    checkpoint.npz        embeddings, head_weight, head_bias, meta (JSON)
    metrics.csv           metric,K,value           (test split, full graph, no dropout)
    bias.csv              attribute,prediction_bias
    pb_by_popularity.csv  group,n_edges,mean_p_b   (analyze)
    pb_by_popularity.png
    pb_edges.csv          edge_index,user,item,p_b,item_popularity_group
    embeddings.csv        node_type,index,dim_0..dim_{d-1}
    tradeoff.png          validation NDCG vs prediction bias per stage-1 epoch
    manifest.json         config, dataset hash, seed, version, outputs, timings
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from importlib import metadata
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import plots
from .bias import bias_probabilities, write_pb_report
from .data import DataError, Dataset, SyntheticSpec, generate_synthetic, load_dataset, save_bundle
from .graph import GraphError, build_graph, normalize
from .metrics import group_means, popularity_groups, write_bias, write_metrics
from .model import export_embeddings, representations
from .optim import DivergenceError
from .training import (ConfigError, DATASET_DEFAULTS, holdout_evaluator, load_checkpoint, make_config,
                       parse_config_text, prepare_data, save_checkpoint, train, write_history)

log = logging.getLogger("graphdebias")

RUNS_ENV = "GRAPHDEBIAS_RUNS"

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "divergence": 6, "internal": 1}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _version() -> str:
    try:
        return metadata.version("graphdebias")
    except metadata.PackageNotFoundError:
        return "unknown"


def _atomic_json(path: Path, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise CLIError("usage", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except (DataError, GraphError, OSError) as exc:
        raise CLIError("data", str(exc)) from None


def _run_dir(out: Optional[str], name: str) -> Path:
    d = Path(out) if out else Path(os.environ.get(RUNS_ENV, "runs")) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _evaluate(model, data: Dataset, ks: list[int], out: Path) -> tuple[dict, dict, list[Path]]:
    ev = holdout_evaluator(data)
    scores = ev.scores(model)
    metrics = ev.ranking(scores, ks)
    biases = ev.biases(scores)
    write_metrics(out / "metrics.csv", metrics, ks)
    paths = [out / "metrics.csv"]
    if biases:
        write_bias(out / "bias.csv", biases)
        paths.append(out / "bias.csv")
    else:
        print("notice: no attribute table with two or more groups; bias metrics skipped", file=sys.stderr)
    return metrics, biases, paths


def _print_report(metrics: dict, biases: dict, ks: list[int]) -> None:
    print(f"users evaluated: {int(metrics['n_users'])}")
    for k in ks:
        print(f"NDCG@{k} = {metrics[f'ndcg@{k}']:.4f}   Recall@{k} = {metrics[f'recall@{k}']:.4f}")
    for name, value in biases.items():
        print(f"prediction bias [{name}] = {value:.4f}")


def cmd_train(args) -> int:
    timings = {}
    t0 = time.perf_counter()
    data = _load(args.data)
    file_values = {}
    if args.config:
        try:
            file_values = parse_config_text(Path(args.config).read_text())
        except OSError as exc:
            raise CLIError("config", str(exc)) from None
    dataset_name = args.dataset or file_values.get("dataset") or \
        (data.name if data.name in DATASET_DEFAULTS else None)
    config = make_config(dataset=dataset_name, file_values=file_values, overrides=_parse_sets(args.set),
                         ablation=args.ablation)
    data = prepare_data(data, config)
    timings["load_s"] = time.perf_counter() - t0

    out = _run_dir(args.out, f"{dataset_name or data.name}-{config.ablation}-seed{config.seed}")
    t1 = time.perf_counter()

    def progress(row):
        if args.verbose and row["stage"] == 1:
            print(f"round {row['round']} epoch {row['epoch']}: loss_rec={row['loss_rec']:.4f} "
                  f"val={row[f'val_ndcg@{config.eval_k}']:.4f}", file=sys.stderr)

    result = train(config, data, on_epoch=progress)
    timings["train_s"] = time.perf_counter() - t1

    write_history(out / "history.csv", result)
    save_checkpoint(out / "checkpoint.npz", result.model, result.head, config, result.rng_state,
                    {"best_round": result.best_round, "rounds_run": result.rounds_run,
                     "dataset_sha256": data.content_hash()})
    ks = args.ks or [config.eval_k]
    t2 = time.perf_counter()
    metrics, biases, paths = _evaluate(result.model, data, ks, out)
    timings["eval_s"] = time.perf_counter() - t2
    timings["total_s"] = time.perf_counter() - t0
    outputs = [out / "history.csv", out / "checkpoint.npz", *paths]
    _atomic_json(out / "manifest.json", {
        "command": "train",
        "config": config.to_dict(),
        "dataset": {"path": str(args.data), "name": data.name, "sha256": data.content_hash()},
        "seed": config.seed,
        "version": _version(),
        "best_round": result.best_round,
        "rounds_run": result.rounds_run,
        "outputs": sorted(p.name for p in outputs),
        "timings": timings,
        "test_metrics": {k: v for k, v in metrics.items()},
        "prediction_bias": biases,
    })
    _print_report(metrics, biases, ks)
    print(f"run directory: {out}")
    return 0


def _load_ckpt(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError("checkpoint", f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    model, _, config, _ = _load_ckpt(args.checkpoint)
    data = prepare_data(_load(args.data), config)
    if (model.weights.shape[0] != data.n_users + data.n_items) or model.n_users != data.n_users:
        raise CLIError("checkpoint", "checkpoint does not match the dataset's user/item counts")
    out = _run_dir(args.out, "eval") if args.out else Path(args.checkpoint).resolve().parent
    ks = args.ks or [config.eval_k]
    metrics, biases, _ = _evaluate(model, data, ks, out)
    _print_report(metrics, biases, ks)
    return 0


def cmd_analyze(args) -> int:
    ckpt = Path(args.checkpoint)
    model, head, config, _ = _load_ckpt(args.checkpoint)
    data = prepare_data(_load(args.data), config)
    if model.n_users != data.n_users or model.weights.shape[0] != data.n_users + data.n_items:
        raise CLIError("checkpoint", "checkpoint does not match the dataset's user/item counts")
    out = Path(args.out) if args.out else ckpt.resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    graph = build_graph(data.train, data.n_users, data.n_items)
    p_b = bias_probabilities(head, model, graph)
    groups = popularity_groups(graph).labels
    edge_groups = groups[graph.items]
    means = group_means(p_b, edge_groups, 4)
    counts = np.bincount(edge_groups, minlength=4)
    with open(out / "pb_by_popularity.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "n_edges", "mean_p_b"])
        for g in range(4):
            w.writerow([g, int(counts[g]), repr(float(means[g]))])
    plots.plot_pb_by_popularity(out / "pb_by_popularity.csv", out / "pb_by_popularity.png")
    write_pb_report(out / "pb_edges.csv", graph, p_b, groups)
    users, items = representations(model, normalize(graph))
    export_embeddings(out / "embeddings.csv", users, items)
    for g in range(4):
        print(f"popularity group {g}: {int(counts[g])} edges, mean P_B = {means[g]:.4f}")

    history = Path(args.history) if args.history else ckpt.resolve().parent / "history.csv"
    if history.exists():
        drawn = plots.plot_tradeoff(history, out / "tradeoff.png", args.attribute)
        if drawn is None:
            print("notice: history has no validation or bias columns; trade-off plot skipped", file=sys.stderr)
    else:
        print(f"notice: {history} not found; trade-off plot skipped", file=sys.stderr)
    return 0


def cmd_gen_synthetic(args) -> int:
    try:
        spec = SyntheticSpec(n_users=args.n_users, n_items=args.n_items, latent_dim=args.latent_dim,
                             popularity_exponent=args.exponent, popularity_skew=args.skew,
                             noise_rate=args.noise, conformity=args.conformity,
                             train_exposures=args.train_exposures, test_exposures=args.test_exposures,
                             seed=args.seed)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None
    ds = generate_synthetic(spec)
    path = save_bundle(ds, args.out)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test interactions to {path}")
    return 0


def _ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphdebias", description="Adversarial edge dropout for graph recommenders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and evaluate it on the test split")
    t.add_argument("--data", required=True, help="dataset directory (bundle, Coat release or TSV triples)")
    t.add_argument("--dataset", help="name of the built-in defaults to start from (e.g. coat, synthetic)")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--ablation", help="full, no_pb, no_pb_no_inv, randomdrop, popdrop, lightgcn or mf")
    t.add_argument("--out", help=f"run directory (default: ${RUNS_ENV}/<dataset>-<ablation>-seed<seed>)")
    t.add_argument("--ks", type=_ks, help="cut-offs for the test report, e.g. '3,5'")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", type=_ks)
    e.add_argument("--out", help="directory for metrics.csv/bias.csv (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="P_B by popularity group, embedding export and trade-off plot")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--history", help="history CSV (default: next to the checkpoint)")
    a.add_argument("--attribute", help="attribute for the trade-off plot (default: first available)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-synthetic", help="write a synthetic popularity-biased dataset bundle")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=SyntheticSpec.seed)
    g.add_argument("--n-users", type=int, default=SyntheticSpec.n_users)
    g.add_argument("--n-items", type=int, default=SyntheticSpec.n_items)
    g.add_argument("--latent-dim", type=int, default=SyntheticSpec.latent_dim)
    g.add_argument("--exponent", type=float, default=SyntheticSpec.popularity_exponent, help="exposure ~ popularity^exponent")
    g.add_argument("--skew", type=float, default=SyntheticSpec.popularity_skew, help="popularity ~ 1/rank^skew")
    g.add_argument("--noise", type=float, default=SyntheticSpec.noise_rate)
    g.add_argument("--conformity", type=float, default=SyntheticSpec.conformity)
    g.add_argument("--train-exposures", type=int, default=SyntheticSpec.train_exposures)
    g.add_argument("--test-exposures", type=int, default=SyntheticSpec.test_exposures)
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CODES["usage"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        return _fail(exc.category, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except DivergenceError as exc:
        return _fail("divergence", str(exc))
    except (DataError, GraphError) as exc:
        return _fail("data", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
