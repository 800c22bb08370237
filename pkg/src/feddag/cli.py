"""Experiment entry point: run, ablate, sweep, export-bench.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import metrics, protocol, reporting
from .data import export_csv
from .ndag import DivergenceError
from .nets import GenArch, TaskArch
from .params import ParamVector

MODE_LABELS = {
    "feddag": "full",
    "no_ndag": "w/o NDAG",
    "no_sha": "w/o SHA",
    "fedavg": "w/o Both",
}

ABLATION_MODES = ("feddag", "no_ndag", "no_sha", "fedavg")

# Checkpoint document fields; this is the on-disk contract.
CHECKPOINT_FIELDS = ("arch", "values", "role", "round")


def save_checkpoint(path: str, params: ParamVector, arch, role: str, round_index: int) -> None:
    """Model snapshot as JSON: {arch, values, role, round}."""
    if isinstance(arch, TaskArch):
        desc = {
            "kind": "task",
            "input_dim": arch.input_dim,
            "hidden_dims": list(arch.hidden_dims),
            "feature_dim": arch.feature_dim,
            "num_classes": arch.num_classes,
        }
    elif isinstance(arch, GenArch):
        desc = {"kind": "gen", "input_dim": arch.input_dim, "hidden_dims": list(arch.hidden_dims)}
    else:
        raise ValueError(f"unknown arch type: {type(arch).__name__}")
    doc = {
        "arch": desc,
        "values": params.values.tolist(),
        "role": role,
        "round": round_index,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str):
    """Returns (params, arch, role, round) from a checkpoint document."""
    with open(path) as fh:
        doc = json.load(fh)
    missing = [f for f in CHECKPOINT_FIELDS if f not in doc]
    if missing:
        raise ValueError(f"checkpoint {path} missing fields: {missing}")
    desc = doc["arch"]
    if desc["kind"] == "task":
        arch = TaskArch(
            input_dim=desc["input_dim"],
            hidden_dims=tuple(desc["hidden_dims"]),
            feature_dim=desc["feature_dim"],
            num_classes=desc["num_classes"],
        )
    elif desc["kind"] == "gen":
        arch = GenArch(input_dim=desc["input_dim"], hidden_dims=tuple(desc["hidden_dims"]))
    else:
        raise ValueError(f"checkpoint {path}: unknown arch kind {desc['kind']!r}")
    params = ParamVector(np.asarray(doc["values"], dtype=np.float64))
    if params.dim != arch.param_count():
        raise ValueError(f"checkpoint {path}: {params.dim} values for {arch.param_count()} params")
    return params, arch, doc["role"], doc["round"]


def _bench_dims(bench) -> tuple[int, int]:
    input_dim = bench[0].train_x.shape[1]
    n_classes = 1 + max(int(max(d.train_y.max(), d.val_y.max())) for d in bench)
    return input_dim, max(n_classes, 2)


def _lodo_report(cfg: dict, collect_trace: bool = False) -> protocol.RunReport:
    bench = cfgmod.benchmark(cfg)
    input_dim, n_classes = _bench_dims(bench)
    task_arch, gen_arch = cfgmod.arches(cfg, input_dim, n_classes)
    fed = cfgmod.fed_config(cfg, n_clients=len(bench) - 1)
    return protocol.run_lodo(bench, fed, task_arch, gen_arch, collect_trace=collect_trace)


def cmd_run(cfg: dict) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    bench = cfgmod.benchmark(cfg)
    input_dim, n_classes = _bench_dims(bench)
    task_arch, gen_arch = cfgmod.arches(cfg, input_dim, n_classes)
    fed = cfgmod.fed_config(cfg, n_clients=len(bench) - 1)
    report = protocol.run_lodo(bench, fed, task_arch, gen_arch, collect_trace=True)
    reporting.write_report_json(os.path.join(out, "report.json"), cfg, report)
    metrics_path = os.path.join(out, "metrics.csv")
    reporting.write_metrics_csv(metrics_path, report)
    reporting.write_sha_log_csv(os.path.join(out, "sha_log.csv"), report)
    reporting.write_trace_csv(os.path.join(out, "train_trace.csv"), report)
    reporting.plot_from_metrics_csv(
        metrics_path,
        os.path.join(out, "loss_vs_round.svg"),
        os.path.join(out, "accuracy_vs_round.svg"),
    )
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for run in report.domains:
        save_checkpoint(
            os.path.join(ckpt_dir, f"final_task_d{run.target_domain}.json"),
            run.final_task,
            task_arch,
            role="global_task",
            round_index=cfg["rounds"],
        )
    avg = report.averages
    auc = "n/a" if avg["auc"] is None else f"{avg['auc']:.4f}"
    print(f"lodo avg: acc {avg['acc']:.4f}  f1 {avg['f1']:.4f}  auc {auc}")
    print(f"artifacts in {out}")
    return 0


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _ablation_metric(finals: list[metrics.EvalResult], name: str) -> list[float | None]:
    vals = [getattr(f, name) for f in finals]
    return [None if v is None else float(v) for v in vals]


def cmd_ablate(cfg: dict) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    seeds = cfg["seeds"]

    jobs = [(mode, seed) for mode in ABLATION_MODES for seed in seeds]

    def one_job(job):
        mode, seed = job
        sub = dict(cfg, mode=mode, seed=seed)
        return protocol_report_summary(_lodo_report(sub))

    results = dict(zip(jobs, protocol.parallel_map(one_job, jobs)))

    domain_ids = results[jobs[0]]["domains"]
    metric_names = ("acc", "f1", "auc")

    # Seed-averaged per-domain and overall-average table, one row per mode.
    header = ["mode"]
    for name in metric_names:
        header += [f"{name}_d{d}" for d in domain_ids] + [f"{name}_avg"]
    rows = []
    for mode in ABLATION_MODES:
        row = [MODE_LABELS[mode]]
        for name in metric_names:
            per_domain = []
            for pos in range(len(domain_ids)):
                vals = [results[(mode, s)][name][pos] for s in seeds]
                per_domain.append(None if any(v is None for v in vals) else float(np.mean(vals)))
            avg = [results[(mode, s)][f"{name}_avg"] for s in seeds]
            avg = None if any(v is None for v in avg) else float(np.mean(avg))
            row += [_fmt_cell(v) for v in per_domain] + [_fmt_cell(avg)]
        rows.append(row)
    with open(os.path.join(out, "ablation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)

    # Paired comparisons against full FedDAG, over seeds and over domains.
    stats_rows = []
    for mode in ABLATION_MODES[1:]:
        for name in metric_names:
            full_by_seed = [results[("feddag", s)][f"{name}_avg"] for s in seeds]
            mode_by_seed = [results[(mode, s)][f"{name}_avg"] for s in seeds]
            pairings = [("seeds", full_by_seed, mode_by_seed)]
            full_by_dom = [
                float(np.mean([results[("feddag", s)][name][pos] for s in seeds]))
                for pos in range(len(domain_ids))
            ]
            mode_by_dom = [
                float(np.mean([results[(mode, s)][name][pos] for s in seeds]))
                for pos in range(len(domain_ids))
            ]
            pairings.append(("domains", full_by_dom, mode_by_dom))
            for pairing, a, b in pairings:
                if any(v is None for v in a + b):
                    continue
                if len(a) < 3:
                    print(
                        f"warning: {pairing} pairing has {len(a)} < 3 points, "
                        "paired stats omitted",
                        file=sys.stderr,
                    )
                    continue
                cmp = metrics.paired_compare(a, b)
                stats_rows.append(
                    [
                        f"full vs {MODE_LABELS[mode]}",
                        name,
                        pairing,
                        repr(cmp.mean_diff),
                        cmp.wins,
                        cmp.losses,
                        cmp.ties,
                        repr(cmp.p_value),
                    ]
                )
    with open(os.path.join(out, "ablation_stats.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["comparison", "metric", "pairing", "mean_diff", "wins", "losses", "ties", "p_value"]
        )
        writer.writerows(stats_rows)

    for mode, row in zip(ABLATION_MODES, rows):
        print(f"{MODE_LABELS[mode]:>9}: " + " ".join(row[1:]))
    print(f"artifacts in {out}")
    return 0


def protocol_report_summary(report: protocol.RunReport) -> dict:
    """Flatten a RunReport to per-domain metric lists keyed by metric name."""
    finals = [r.final for r in report.domains]
    summary = {"domains": [r.target_domain for r in report.domains]}
    for name in ("acc", "f1", "auc"):
        summary[name] = _ablation_metric(finals, name)
        summary[f"{name}_avg"] = report.averages[name]
    return summary


def cmd_sweep(cfg: dict) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    param = cfg["sweep_param"]
    values = cfg["sweep_values"]
    int_params = {"k", "eval_clients_per_round", "n_clients"}
    if param in int_params and not all(float(v).is_integer() for v in values):
        raise cfgmod.ConfigError(f"sweep_values for {param!r} must be integers, got {values}")

    def cfg_for(value):
        if param in int_params:
            value = int(value)
        if param == "n_clients":
            # One client per source domain: n domains = clients + held-out target.
            return cfgmod.resolve(dict(cfg, n_domains=value + 1))
        return cfgmod.resolve(dict(cfg, **{param: value}))

    sub_cfgs = [cfg_for(v) for v in values]
    reports = protocol.parallel_map(_lodo_report, sub_cfgs)

    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "acc_avg", "f1_avg", "auc_avg"])
        for value, report in zip(values, reports):
            avg = report.averages
            writer.writerow(
                [param, value, _fmt_cell(avg["acc"]), _fmt_cell(avg["f1"]), _fmt_cell(avg["auc"])]
            )

    xs = [float(v) for v in values]
    series = []
    for name in ("acc", "f1", "auc"):
        ys = [r.averages[name] for r in reports]
        if all(y is not None for y in ys):
            series.append((f"avg {name}", xs, [float(y) for y in ys]))
    reporting.plot_lines(
        os.path.join(out, "sweep.svg"), f"Sweep over {param}", param, "metric", series
    )
    for value, report in zip(values, reports):
        print(f"{param}={value}: acc {report.averages['acc']:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_export_bench(cfg: dict, out_path: str | None) -> int:
    spec = cfgmod.bench_spec(cfg)
    if out_path is None:
        os.makedirs(cfg["out"], exist_ok=True)
        out_path = os.path.join(cfg["out"], "bench.csv")
    export_csv(spec, out_path)
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddag",
        description="Federated domain-generalization simulator "
        "(adversarial novel-domain generation + sharpness-aware aggregation)",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
        ("run", "leave-one-domain-out run with full artifacts"),
        ("ablate", "four-mode ablation over the seed list"),
        ("sweep", "hyperparameter sweep (sweep_param/sweep_values from config)"),
        ("export-bench", "write the synthetic benchmark as CSV"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=True, help="path to flat JSON config")
        p.add_argument("--out", help="output directory (export-bench: output file)")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--mode", choices=protocol.MODES, help="override config mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.out is not None and args.command != "export-bench":
        overrides["out"] = args.out
    try:
        cfg = cfgmod.load(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_export_bench(cfg, args.out)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, protocol.ClientRoundError) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
