"""Command line: prepare, build-graphs, train, eval, sweep, bench.

Every command works inside one output directory::

    OUT/prepared/   split files, stats.json, sources.json
    OUT/graphs/     ui.grph, si.grph, mm.grph
    OUT/            best.ckpt, train_report.json, train_log.jsonl, eval_*.json, ...

Settings come from an optional JSON config file, overridden by flags.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import resource
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .core import ConfigError, DataError, HyperParams
from .data import (build_sequences, dataset_stats, five_core_filter, leave_two_out, load_features, load_split,
                   read_interactions_csv, save_features, save_split, write_interactions_csv)
from .evaluation import bucket_evaluate, evaluate
from .graphs import build_mm_graph, load_graph, save_graph
from .model import Ablation, load_checkpoint, propagation_counter
from .pipeline import Graphs, build_graphs, build_model
from .synthetic import make_cluster_dataset
from .train import TrainingDivergence, fit, score_state

log = logging.getLogger("musicrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
ABLATION_FLAGS = ("no_ui", "no_si", "no_mm", "no_mm_id_seed", "sinusoidal_pool")
DEFAULT_GRID = (0.001, 0.01, 0.1, 1.0)


@dataclass
class RunConfig:
    out: Path = Path("run")
    interactions: Optional[Path] = None
    visual: Optional[Path] = None
    text: Optional[Path] = None
    hyperparams: HyperParams = field(default_factory=HyperParams)
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0
    core: int = 5
    sweep_param: str = "lambda_u"
    sweep_grid: List[float] = field(default_factory=lambda: list(DEFAULT_GRID))

    @property
    def prepared(self) -> Path:
        return self.out / "prepared"

    @property
    def graph_dir(self) -> Path:
        return self.out / "graphs"


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------
def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (flags override it)")
    common.add_argument("--out", type=Path, help="working/output directory")
    common.add_argument("--interactions", type=Path, help="user,item,timestamp CSV")
    common.add_argument("--visual", type=Path, help="visual feature file (FEAT binary or CSV)")
    common.add_argument("--text", type=Path, help="text feature file (FEAT binary or CSV)")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a hyperparameter, e.g. --set d=32 --set lr=0.01")
    for flag in ABLATION_FLAGS:
        common.add_argument(f"--{flag.replace('_', '-')}", dest=flag, action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="musicrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", parents=[common], help="5-core filter, split, sequences, stats")
    prep.add_argument("--core", type=int, help="k-core threshold (default 5, 0 disables)")
    prep.add_argument("--synthetic", type=int, metavar="SEED",
                      help="generate the cluster-planted fixture instead of reading --interactions")

    sub.add_parser("build-graphs", parents=[common], help="build and cache UI/SI/MM graphs")

    tr = sub.add_parser("train", parents=[common], help="fit the model with early stopping")
    tr.add_argument("--max-epochs", type=int)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on valid and test")
    ev.add_argument("--checkpoint", type=Path)

    sw = sub.add_parser("sweep", parents=[common], help="train/eval over a loss-weight grid")
    sw.add_argument("--param", choices=("lambda_u", "lambda_i"))
    sw.add_argument("--grid", type=lambda s: [float(x) for x in s.split(",")])
    sw.add_argument("--max-epochs", type=int)

    be = sub.add_parser("bench", parents=[common], help="time a fixed number of epochs")
    be.add_argument("--epochs", type=int, default=3)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw: Dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
    hp_values = dict(raw.get("hyperparams", {}))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        hp_values[k.strip()] = _parse_value(v.strip())
    if getattr(args, "max_epochs", None) is not None:
        hp_values["max_epochs"] = args.max_epochs
    try:
        hp = HyperParams.from_dict(hp_values)
    except TypeError as exc:
        raise ConfigError(str(exc))

    flags = {f: bool(raw.get("ablation", {}).get(f, False)) for f in ABLATION_FLAGS}
    for f in ABLATION_FLAGS:
        if getattr(args, f, None):
            flags[f] = True
    ablation = Ablation(**flags)

    def pick(name, default=None):
        v = getattr(args, name, None)
        if v is not None:
            return v
        return raw.get(name, default)

    out = Path(pick("out", "run"))
    cfg = RunConfig(
        out=out,
        interactions=Path(pick("interactions")) if pick("interactions") else None,
        visual=Path(pick("visual")) if pick("visual") else None,
        text=Path(pick("text")) if pick("text") else None,
        hyperparams=hp,
        ablation=ablation,
        seed=int(pick("seed", 0)),
        core=int(pick("core", 5)),
        sweep_param=pick("param", raw.get("sweep", {}).get("param", "lambda_u")),
        sweep_grid=list(pick("grid", raw.get("sweep", {}).get("grid", list(DEFAULT_GRID)))),
    )
    if args.command == "sweep" and not cfg.sweep_grid:
        raise ConfigError("sweep grid must be nonempty")
    return cfg


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------
def _feature_paths(cfg: RunConfig):
    visual, text = cfg.visual, cfg.text
    sources = cfg.prepared / "sources.json"
    if (visual is None or text is None) and sources.exists():
        src = json.loads(sources.read_text())
        visual = visual or (Path(src["visual"]) if src.get("visual") else None)
        text = text or (Path(src["text"]) if src.get("text") else None)
    if visual is None or text is None:
        raise ConfigError("both --visual and --text feature files are required")
    return visual, text


def load_inputs(cfg: RunConfig):
    split = load_split(cfg.prepared)
    visual, text = _feature_paths(cfg)
    F_v = load_features(visual, split.n_items, None, split.train.item_ids)
    F_t = load_features(text, split.n_items, None, split.train.item_ids)
    return split, F_v, F_t


def load_model(cfg: RunConfig, ablation: Optional[Ablation] = None, hp: Optional[HyperParams] = None):
    split, F_v, F_t = load_inputs(cfg)
    hp = hp or cfg.hyperparams
    seqs = build_sequences(split, hp.L_max)
    mm_path = cfg.graph_dir / "mm.grph"
    cached = None
    if mm_path.exists():
        meta_path = cfg.graph_dir / "graphs.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        if meta.get("k_nn") == hp.k_nn and meta.get("alpha_v") == hp.alpha_v:
            cached = load_graph(mm_path, "MM")
            log.info("using cached MM graph %s", mm_path)
    graphs = build_graphs(split, seqs, F_v, F_t, hp, mm=cached)
    model = build_model(split, F_v, F_t, hp, ablation or cfg.ablation, graphs=graphs)
    return split, model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_prepare(cfg: RunConfig, args) -> int:
    cfg.prepared.mkdir(parents=True, exist_ok=True)
    sources = {"visual": str(cfg.visual) if cfg.visual else None, "text": str(cfg.text) if cfg.text else None}
    if args.synthetic is not None:
        raw_dir = cfg.out / "raw"
        raw_dir.mkdir(parents=True, exist_ok=True)
        ds = make_cluster_dataset(seed=args.synthetic)
        write_interactions_csv(raw_dir / "interactions.csv", ds.log)
        raw_items = np.array(ds.log.item_ids, dtype=np.int64)
        for name, F in (("visual", ds.F_v), ("text", ds.F_t)):
            by_raw = np.zeros((raw_items.max() + 1, F.shape[1]))
            by_raw[raw_items] = F
            save_features(raw_dir / f"{name}.feat", by_raw)
        cfg.interactions = raw_dir / "interactions.csv"
        sources = {"visual": str(raw_dir / "visual.feat"), "text": str(raw_dir / "text.feat")}
    if cfg.interactions is None:
        raise ConfigError("prepare needs --interactions (or --synthetic SEED)")
    raw = read_interactions_csv(cfg.interactions)
    filtered = five_core_filter(raw, cfg.core) if cfg.core else raw
    split = leave_two_out(filtered)
    seqs = build_sequences(split, cfg.hyperparams.L_max)
    save_split(cfg.prepared, split, seqs)
    stats = {"raw": dataset_stats(raw), "filtered": dataset_stats(filtered), "core": cfg.core}
    (cfg.prepared / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    (cfg.prepared / "sources.json").write_text(json.dumps(sources, indent=2, sort_keys=True) + "\n")
    f = stats["filtered"]
    print(f"users={f['users']} items={f['items']} interactions={f['interactions']} sparsity={f['sparsity']:.2f}%")
    return EXIT_OK


def cmd_build_graphs(cfg: RunConfig, args) -> int:
    split, F_v, F_t = load_inputs(cfg)
    hp = cfg.hyperparams
    seqs = build_sequences(split, hp.L_max)
    graphs = build_graphs(split, seqs, F_v, F_t, hp)
    cfg.graph_dir.mkdir(parents=True, exist_ok=True)
    for name in ("ui", "si", "mm"):
        save_graph(cfg.graph_dir / f"{name}.grph", getattr(graphs, name))
    meta = {"k_nn": hp.k_nn, "alpha_v": hp.alpha_v, "tau_jac": hp.tau_jac, "L_max": hp.L_max,
            "nnz": {n: getattr(graphs, n).nnz for n in ("ui", "si", "mm")}}
    (cfg.graph_dir / "graphs.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(json.dumps(meta["nnz"], sort_keys=True))
    return EXIT_OK


def _train(cfg: RunConfig, split, model, tag: str = ""):
    cfg.out.mkdir(parents=True, exist_ok=True)
    log_path = cfg.out / f"train_log{tag}.jsonl"
    with open(log_path, "w") as fh:
        def emit(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        best, report = fit(model, split, seed=cfg.seed, checkpoint_path=str(cfg.out / f"best{tag}.ckpt"),
                           epoch_callback=emit)
    # wall-clock timings live in the JSONL log so the report itself is reproducible
    (cfg.out / f"train_report{tag}.json").write_text(
        json.dumps(report.deterministic_view(), indent=2, sort_keys=True) + "\n")
    return best, report


def cmd_train(cfg: RunConfig, args) -> int:
    split, model = load_model(cfg)
    _, report = _train(cfg, split, model)
    print(f"best epoch {report.best_epoch}: valid R@20 = {report.best_valid_r20:.4f} ({report.stop_reason})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = args.checkpoint or cfg.out / "best.ckpt"
    if not Path(ckpt).exists():
        raise DataError(f"checkpoint {ckpt} not found")
    params, _, meta = load_checkpoint(ckpt)
    hp = HyperParams.from_dict(meta["hyperparams"]) if "hyperparams" in meta else cfg.hyperparams
    ablation = Ablation.named(meta.get("ablation")) if "ablation" in meta else cfg.ablation
    split, model = load_model(cfg, ablation, hp)
    state = score_state(model, params)
    valid = evaluate(split, state, "valid", batch_size=hp.eval_batch_size)
    test = bucket_evaluate(split, state, "test", batch_size=hp.eval_batch_size)
    for rep in (valid, test):
        (cfg.out / f"eval_{rep.mode}.json").write_text(rep.to_json() + "\n")
        print(rep.to_table())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    rows = []
    for value in cfg.sweep_grid:
        hp = cfg.hyperparams.replace(**{cfg.sweep_param: float(value)})
        split, model = load_model(cfg, hp=hp)
        tag = f"_{cfg.sweep_param}_{value:g}"
        best, report = _train(cfg, split, model, tag)
        test = evaluate(split, score_state(model, best), "test", batch_size=hp.eval_batch_size)
        rows.append({"param": cfg.sweep_param, "value": value, "best_epoch": report.best_epoch,
                     "valid_r20": report.best_valid_r20, **{f"test_{k}": v for k, v in test.metrics.items()}})
    (cfg.out / f"sweep_{cfg.sweep_param}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(f"{cfg.sweep_param:>10}  {'valid R@20':>10}  {'test R@20':>10}  {'test N@20':>10}")
    for r in rows:
        print(f"{r['value']:>10g}  {r['valid_r20']:>10.4f}  {r['test_recall@20']:>10.4f}  {r['test_ndcg@20']:>10.4f}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args) -> int:
    hp = cfg.hyperparams.replace(patience=args.epochs + 1)
    split, model = load_model(cfg, hp=hp)
    t0 = time.perf_counter()
    _, report = fit(model, split, seed=cfg.seed, max_epochs=args.epochs)
    wall = time.perf_counter() - t0
    peak_kib = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    result = {
        "epochs": [{"epoch": e["epoch"], "seconds": e["seconds"], "batches": e["batches"],
                    "propagations": e["propagations"], "propagations_per_batch": e["propagations_per_batch"],
                    "propagations_by_graph": e["propagations_by_graph"]} for e in report.epochs],
        "total_seconds": wall,
        "peak_rss_mib": peak_kib / 1024.0,
        "nnz": {"ui": model.ui_graph.nnz, "si": model.si_graph.nnz, "mm": model.mm_graph.nnz},
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    for e in result["epochs"]:
        print(f"epoch {e['epoch']}: {e['seconds']:.3f}s  propagations/batch={e['propagations_per_batch']:.0f}")
    print(f"peak RSS {result['peak_rss_mib']:.1f} MiB")
    return EXIT_OK


COMMANDS = {
    "prepare": cmd_prepare,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
