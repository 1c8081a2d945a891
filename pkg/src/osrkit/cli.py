"""Command-line operator surface.

Subcommands: pretrain, finetune, evaluate (single pipeline cells),
experiment (the full pre-training x loss grid with aggregation and
significance tests), and openness (the known-class-count sweep).

Artifacts land under output_dir/<dataset>/<pretrain>-<loss>/group<g>/run<r>/
so aggregation is a pure directory scan; existing valid cells are skipped
unless --force is given. Failures exit nonzero with a JSON error object on
stderr.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import STAGE_PRETRAINED, load_checkpoint
from .config import DATASETS, ExperimentConfig, load_config, write_config
from .dataio import load_dataset, make_open_set_split
from .evaluate import (
    AGGREGATE_METRICS,
    AggregateResult,
    EvalReport,
    evaluate_model,
    openness,
    significance_vs_baseline,
)
from .train import (
    PrototypeSet,
    compute_prototypes,
    derive_seed,
    finetune,
    pretrain,
    save_run_checkpoint,
)

GRID_PRETRAIN = ("none", "rotnet", "dtae")
GRID_LOSSES = ("ce", "ii", "triplet")


def _cell_dir(cfg: ExperimentConfig, pretrain_method: str, loss: str,
              group: int, run: int) -> Path:
    return (Path(cfg.output_dir) / cfg.dataset / f"{pretrain_method}-{loss}"
            / f"group{group}" / f"run{run}")


def _write_history_csv(path: Path, history: list[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            writer.writerow([i, v])


def _seeds_for(cfg: ExperimentConfig, group: int, run: int) -> tuple[int, int]:
    split_seed = derive_seed(cfg.base_seed, "group", group)
    run_seed = derive_seed(cfg.base_seed, "cell", group, run)
    return split_seed, run_seed


@functools.lru_cache(maxsize=2)
def _load_dataset_cached(name: str, data_dir: str):
    return load_dataset(name, data_dir)


def _load_split(cfg: ExperimentConfig, group: int):
    ds_train, ds_test = _load_dataset_cached(cfg.dataset, str(cfg.data_dir))
    split_seed = derive_seed(cfg.base_seed, "group", group)
    return make_open_set_split(ds_train, ds_test, cfg.num_known, split_seed)


def _write_report_files(cell: Path, report: EvalReport) -> None:
    (cell / "report.json").write_text(json.dumps(report.to_json_dict(), indent=2))
    with open(cell / "confusion.csv", "w", newline="") as f:
        writer = csv.writer(f)
        c = report.confusion.shape[0]
        header = [f"pred_{i}" for i in range(c - 1)] + ["pred_unknown"]
        writer.writerow(["true"] + header)
        for i, row in enumerate(report.confusion):
            label = f"class_{i}" if i < c - 1 else "unknown"
            writer.writerow([label] + [int(v) for v in row])
    with open(cell / "histograms.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "known_count", "unknown_count"])
        h = report.histograms
        for i in range(len(h.known)):
            writer.writerow([h.edges[i], h.edges[i + 1], int(h.known[i]), int(h.unknown[i])])
    with open(cell / "representations.csv", "w", newline="") as f:
        writer = csv.writer(f)
        dim = report.representations.shape[1]
        writer.writerow(["sample", *[f"z{i}" for i in range(dim)], "true_label", "prediction"])
        for i in range(len(report.representations)):
            writer.writerow([i, *[f"{v:.6g}" for v in report.representations[i]],
                             int(report.true_labels[i]), int(report.decisions[i])])


def _run_cell_files(cfg: ExperimentConfig, pretrain_method: str, loss: str,
                    group: int, run: int, force: bool = False) -> Path:
    """Execute (or skip) one (arm, group, run) cell, writing all artifacts."""
    cell = _cell_dir(cfg, pretrain_method, loss, group, run)
    report_path = cell / "report.json"
    if report_path.exists() and not force:
        try:
            json.loads(report_path.read_text())
            return cell
        except (json.JSONDecodeError, OSError):
            pass  # invalid artifact: fall through and recompute
    cell.mkdir(parents=True, exist_ok=True)
    split_seed, run_seed = _seeds_for(cfg, group, run)
    split = _load_split(cfg, group)
    tcfg = cfg.train_config(run_seed, pretrain_method=pretrain_method, finetune_loss=loss)

    timings = {}
    init = None
    if pretrain_method != "none":
        t0 = time.perf_counter()
        init = pretrain(split, tcfg)
        timings["pretrain_seconds"] = time.perf_counter() - t0
        save_run_checkpoint(cell / "pretrained.npz", init)
        _write_history_csv(cell / "pretrain_history.csv", init.meta["loss_history"])
    t0 = time.perf_counter()
    ckpt = finetune(split, tcfg, init)
    timings["finetune_seconds"] = time.perf_counter() - t0
    save_run_checkpoint(cell / "finetuned.npz", ckpt)
    _write_history_csv(cell / "finetune_history.csv", ckpt.meta["loss_history"])

    protos = compute_prototypes(ckpt, split, cfg.contamination)
    (cell / "prototypes.json").write_text(json.dumps(protos.to_dict(), indent=2))

    report = evaluate_model(ckpt, protos, split, metadata={
        "dataset": cfg.dataset, "pretrain": pretrain_method, "loss": loss,
        "group": group, "run": run, "seed": run_seed, "split_seed": split_seed,
        "timings": timings,
    })
    _write_report_files(cell, report)
    write_config(cell / "config.toml", replace(
        cfg, pretrain=replace(cfg.pretrain, method=pretrain_method),
        finetune=replace(cfg.finetune, loss=loss)))
    return cell


def _cell_worker(args) -> str:
    cfg_dict, pretrain_method, loss, group, run, force = args
    try:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(limits=1)
    except ImportError:
        limit = None
    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        return str(_run_cell_files(cfg, pretrain_method, loss, group, run, force))
    finally:
        if limit is not None:
            limit.unregister()


def _run_cells(cfg: ExperimentConfig, cells: list[tuple[str, str, int, int]],
               force: bool) -> None:
    if cfg.jobs <= 1 or len(cells) <= 1:
        for pm, loss, g, r in cells:
            _run_cell_files(cfg, pm, loss, g, r, force)
        return
    from concurrent.futures import ProcessPoolExecutor
    work = [(cfg.to_dict(), pm, loss, g, r, force) for pm, loss, g, r in cells]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        for _ in pool.map(_cell_worker, work):
            pass


def _collect_arm(cfg: ExperimentConfig, pretrain_method: str, loss: str) -> AggregateResult:
    """Aggregate a completed arm by scanning its report files in grid order."""
    values = {m: [] for m in AGGREGATE_METRICS}
    wall = {"pretrain_seconds": 0.0, "finetune_seconds": 0.0}
    n = 0
    for g in range(cfg.groups):
        for r in range(cfg.runs_per_group):
            payload = json.loads(
                (_cell_dir(cfg, pretrain_method, loss, g, r) / "report.json").read_text())
            for m in AGGREGATE_METRICS:
                values[m].append(float(payload[m]))
            timings = payload["metadata"].get("timings", {})
            for key in wall:
                wall[key] += float(timings.get(key, 0.0))
            n += 1
    return AggregateResult(
        arm={"dataset": cfg.dataset, "pretrain": pretrain_method, "loss": loss},
        n_runs=n,
        means={m: float(np.mean(v)) for m, v in values.items()},
        stds={m: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0 for m, v in values.items()},
        values=values,
        wall_clock=wall,
    )


def cmd_pretrain(cfg: ExperimentConfig, group: int, run: int, force: bool) -> dict:
    if cfg.pretrain.method == "none":
        raise ValueError("pretrain.method is 'none'; nothing to pre-train")
    cell = _cell_dir(cfg, cfg.pretrain.method, cfg.finetune.loss, group, run)
    ckpt_path = cell / "pretrained.npz"
    if ckpt_path.exists() and not force:
        try:
            load_checkpoint(ckpt_path)
            return {"checkpoint": str(ckpt_path), "skipped": True}
        except (ValueError, KeyError, OSError):
            pass
    cell.mkdir(parents=True, exist_ok=True)
    split_seed, run_seed = _seeds_for(cfg, group, run)
    split = _load_split(cfg, group)
    tcfg = cfg.train_config(run_seed)
    ckpt = pretrain(split, tcfg)
    save_run_checkpoint(ckpt_path, ckpt)
    _write_history_csv(cell / "pretrain_history.csv", ckpt.meta["loss_history"])
    write_config(cell / "config.toml", cfg)
    return {"checkpoint": str(ckpt_path), "loss_history": ckpt.meta["loss_history"]}


def cmd_finetune(cfg: ExperimentConfig, group: int, run: int,
                 init_path: str | None, force: bool) -> dict:
    cell = _cell_dir(cfg, cfg.pretrain.method, cfg.finetune.loss, group, run)
    ckpt_path = cell / "finetuned.npz"
    protos_path = cell / "prototypes.json"
    if ckpt_path.exists() and protos_path.exists() and not force:
        try:
            load_checkpoint(ckpt_path)
            json.loads(protos_path.read_text())
            return {"checkpoint": str(ckpt_path), "prototypes": str(protos_path),
                    "skipped": True}
        except (ValueError, KeyError, OSError, json.JSONDecodeError):
            pass
    cell.mkdir(parents=True, exist_ok=True)
    split_seed, run_seed = _seeds_for(cfg, group, run)
    split = _load_split(cfg, group)
    tcfg = cfg.train_config(run_seed)

    init = None
    if cfg.pretrain.method != "none":
        if init_path is None:
            init_path = cell / "pretrained.npz"
        init = load_checkpoint(init_path)
        if init.stage != STAGE_PRETRAINED:
            raise ValueError(
                f"--init checkpoint has stage {init.stage!r}, expected 'pretrained'")
    ckpt = finetune(split, tcfg, init)
    save_run_checkpoint(ckpt_path, ckpt)
    _write_history_csv(cell / "finetune_history.csv", ckpt.meta["loss_history"])
    protos = compute_prototypes(ckpt, split, cfg.contamination)
    protos_path.write_text(json.dumps(protos.to_dict(), indent=2))
    write_config(cell / "config.toml", cfg)
    return {"checkpoint": str(ckpt_path), "prototypes": str(protos_path)}


def cmd_evaluate(cfg: ExperimentConfig, group: int, run: int, force: bool) -> dict:
    cell = _cell_dir(cfg, cfg.pretrain.method, cfg.finetune.loss, group, run)
    report_path = cell / "report.json"
    if report_path.exists() and not force:
        try:
            return {"report": str(report_path),
                    "summary": json.loads(report_path.read_text()), "skipped": True}
        except (json.JSONDecodeError, OSError):
            pass
    ckpt_path = cell / "finetuned.npz"
    protos_path = cell / "prototypes.json"
    if not ckpt_path.exists() or not protos_path.exists():
        raise FileNotFoundError(
            f"missing artifacts in {cell}: run the finetune step first")
    ckpt = load_checkpoint(ckpt_path)
    protos = PrototypeSet.from_dict(json.loads(protos_path.read_text()))
    split_seed, run_seed = _seeds_for(cfg, group, run)
    split = _load_split(cfg, group)
    report = evaluate_model(ckpt, protos, split, metadata={
        "dataset": cfg.dataset, "pretrain": cfg.pretrain.method,
        "loss": cfg.finetune.loss, "group": group, "run": run,
        "seed": run_seed, "split_seed": split_seed,
    })
    _write_report_files(cell, report)
    return {"report": str(report_path), "summary": report.to_json_dict()}


def cmd_experiment(cfg: ExperimentConfig, force: bool,
                   pretrain_methods=GRID_PRETRAIN, losses=GRID_LOSSES) -> dict:
    """Drive the full grid, then emit aggregate tables with significance
    markers against the no-pre-training baseline of each loss."""
    cells = [(pm, loss, g, r)
             for loss in losses for pm in pretrain_methods
             for g in range(cfg.groups) for r in range(cfg.runs_per_group)]
    _run_cells(cfg, cells, force)

    arms = {(pm, loss): _collect_arm(cfg, pm, loss)
            for loss in losses for pm in pretrain_methods}
    significance = {}
    for loss in losses:
        baseline = arms.get(("none", loss))
        for pm in pretrain_methods:
            if pm == "none" or baseline is None:
                continue
            significance[(pm, loss)] = significance_vs_baseline(arms[(pm, loss)], baseline)

    out_root = Path(cfg.output_dir) / cfg.dataset
    auc_csv = out_root / "table_auc.csv"
    with open(auc_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["loss", "pretrain", "fpr_cap", "mean_auc", "std_auc",
                         "p_vs_none", "significant"])
        for loss in losses:
            for pm in pretrain_methods:
                agg = arms[(pm, loss)]
                sig = significance.get((pm, loss), {})
                for cap, metric in (("100%", "auc_100"), ("10%", "auc_10")):
                    s = sig.get(metric, {})
                    writer.writerow([loss, pm, cap, f"{agg.means[metric]:.4f}",
                                     f"{agg.stds[metric]:.4f}",
                                     "" if s.get("p") is None else f"{s['p']:.4g}",
                                     "yes" if s.get("significant_improvement") else ""])
    f1_csv = out_root / "table_f1.csv"
    with open(f1_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["loss", "pretrain", "domain", "mean_f1", "std_f1",
                         "p_vs_none", "significant"])
        for loss in losses:
            for pm in pretrain_methods:
                agg = arms[(pm, loss)]
                sig = significance.get((pm, loss), {})
                for domain, metric in (("known", "f1_known"), ("unknown", "f1_unknown"),
                                       ("overall", "f1_overall")):
                    s = sig.get(metric, {})
                    writer.writerow([loss, pm, domain, f"{agg.means[metric]:.4f}",
                                     f"{agg.stds[metric]:.4f}",
                                     "" if s.get("p") is None else f"{s['p']:.4g}",
                                     "yes" if s.get("significant_improvement") else ""])
    timing_csv = out_root / "timing.csv"
    with open(timing_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pretrain", "loss", "pretrain_seconds_total",
                         "finetune_seconds_total", "runs"])
        for (pm, loss), agg in arms.items():
            writer.writerow([pm, loss, f"{agg.wall_clock['pretrain_seconds']:.1f}",
                             f"{agg.wall_clock['finetune_seconds']:.1f}", agg.n_runs])

    summary = {
        "arms": {f"{pm}-{loss}": arms[(pm, loss)].means
                 for loss in losses for pm in pretrain_methods},
        "auc_table": str(auc_csv),
        "f1_table": str(f1_csv),
        "timing_table": str(timing_csv),
    }
    (out_root / "aggregate.json").write_text(json.dumps({
        "arms": {f"{pm}-{loss}": {
            "means": arms[(pm, loss)].means,
            "stds": arms[(pm, loss)].stds,
            "values": arms[(pm, loss)].values,
            "n_runs": arms[(pm, loss)].n_runs,
            "wall_clock": arms[(pm, loss)].wall_clock,
        } for loss in losses for pm in pretrain_methods},
        "significance": {f"{pm}-{loss}": sig
                         for (pm, loss), sig in significance.items()},
    }, indent=2))
    return summary


def cmd_openness(cfg: ExperimentConfig, force: bool,
                 pretrain_methods=GRID_PRETRAIN) -> dict:
    """Sweep the number of known classes from 2 to 9 for each method and
    record AUC(100% FPR) against the computed openness."""
    rows = []
    for n_train in range(2, 10):
        sweep_cfg = replace(cfg, num_known=n_train,
                            output_dir=str(Path(cfg.output_dir) / "openness"
                                           / f"ntrain{n_train}"))
        for pm in pretrain_methods:
            cells = [(pm, cfg.finetune.loss, g, r)
                     for g in range(cfg.groups) for r in range(cfg.runs_per_group)]
            _run_cells(sweep_cfg, cells, force)
            agg = _collect_arm(sweep_cfg, pm, cfg.finetune.loss)
            rows.append({
                "n_train": n_train, "n_test": 10, "n_target": n_train + 1,
                "openness": openness(n_train, 10, n_train + 1),
                "method": pm, "mean_auc_100": agg.means["auc_100"],
                "std_auc_100": agg.stds["auc_100"], "runs": agg.n_runs,
            })
    out_root = Path(cfg.output_dir) / cfg.dataset
    out_root.mkdir(parents=True, exist_ok=True)
    sweep_csv = out_root / "openness_sweep.csv"
    with open(sweep_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_train", "n_test", "n_target", "openness", "method",
                         "mean_auc_100", "std_auc_100", "runs"])
        for row in rows:
            writer.writerow([row["n_train"], row["n_test"], row["n_target"],
                             f"{row['openness']:.4f}", row["method"],
                             f"{row['mean_auc_100']:.4f}",
                             f"{row['std_auc_100']:.4f}", row["runs"]])
    return {"sweep": str(sweep_csv), "rows": rows}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osrkit",
        description="Open-set recognition: self-supervised pre-training, "
                    "fine-tuning, prototype-based rejection, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--dataset", choices=DATASETS)
        p.add_argument("--data-dir")
        p.add_argument("--output-dir")
        p.add_argument("--pretrain", choices=("dtae", "rotnet", "none"),
                       help="pre-training method")
        p.add_argument("--loss", choices=("ce", "ii", "triplet"),
                       help="fine-tuning loss")
        p.add_argument("--seed", type=int, help="base seed for the run grid")
        p.add_argument("--jobs", type=int, help="parallel cells for grid commands")
        p.add_argument("--force", action="store_true",
                       help="recompute even when valid artifacts exist")
        p.add_argument("--num-known", type=int, help="known classes per split")
        p.add_argument("--train-limit", type=int,
                       help="per-run training subsample (0 = full set)")
        p.add_argument("--pretrain-epochs", type=int)
        p.add_argument("--finetune-epochs", type=int)
        p.add_argument("--batch-size", type=int)

    for name, needs_cell in (("pretrain", True), ("finetune", True),
                             ("evaluate", True), ("experiment", False),
                             ("openness", False)):
        p = sub.add_parser(name)
        add_common(p)
        if needs_cell:
            p.add_argument("--group", type=int, default=0)
            p.add_argument("--run", type=int, default=0)
        if name == "finetune":
            p.add_argument("--init", help="pretrained checkpoint to start from")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "dataset": args.dataset, "data_dir": args.data_dir,
        "output_dir": args.output_dir, "base_seed": args.seed,
        "jobs": args.jobs, "num_known": args.num_known,
        "train_limit": args.train_limit, "batch_size": args.batch_size,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.pretrain is not None:
        cfg.pretrain.method = args.pretrain
    if args.loss is not None:
        cfg.finetune.loss = args.loss
    if args.pretrain_epochs is not None:
        cfg.pretrain.epochs = args.pretrain_epochs
    if args.finetune_epochs is not None:
        cfg.finetune.epochs = args.finetune_epochs
    return cfg.validate()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "pretrain":
            result = cmd_pretrain(cfg, args.group, args.run, args.force)
        elif args.command == "finetune":
            result = cmd_finetune(cfg, args.group, args.run, args.init, args.force)
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, args.group, args.run, args.force)
        elif args.command == "experiment":
            result = cmd_experiment(cfg, args.force)
        else:
            result = cmd_openness(cfg, args.force)
    except Exception as exc:  # noqa: BLE001 - surface as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
