"""Command-line interface: synthesize tables, select portfolios, benchmark.

Four subcommands share one configuration model: built-in defaults, overridden
by a JSON config file (``--config``), overridden by the two supported
environment variables (ZSHPO_OUTPUT_DIR, ZSHPO_JOBS), overridden by explicit
flags.  Every run echoes its merged configuration into the output directory
so it can be reproduced exactly.  Usage errors exit 2; runtime failures print
one machine-parseable JSON line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from zshpo.bench import (
    LodoResult,
    MethodSpec,
    compare,
    emit_plot_data,
    lodo_fold,
    run_method,
)
from zshpo.mfhb import mf_run
from zshpo.obo import OboParams, obo_run
from zshpo.tables import (
    NORMALIZATION_SCHEMES,
    load_table,
    red,
    reference_losses,
    save_table,
    synth_table,
)

METHODS = ("naive", "obo", "mf", "surrogate", "exhaustive")

DEFAULTS = {
    "budget": 3000,
    "k": 5,
    "eta": 3,
    "n_trees": 20,
    "rho": None,
    "seed": 0,
    "seeds": [0],
    "normalization": "red",
    "aggregate": "mean",
    "output_dir": "zshpo-run",
    "jobs": 1,
    "n_configs": 200,
    "n_datasets": 20,
    "planted_k": 3,
    "noise": 0.05,
}


def _load_config_file(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    allowed = set(DEFAULTS) | {"table", "method", "methods", "results"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return data


def effective_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, environment, and flags (in that order)."""
    cfg = dict(DEFAULTS)
    cfg.update({"table": None, "method": None, "methods": None, "results": None})
    if getattr(args, "config", None):
        cfg.update(_load_config_file(args.config))
    if os.environ.get("ZSHPO_OUTPUT_DIR"):
        cfg["output_dir"] = os.environ["ZSHPO_OUTPUT_DIR"]
    if os.environ.get("ZSHPO_JOBS"):
        try:
            cfg["jobs"] = int(os.environ["ZSHPO_JOBS"])
        except ValueError:
            raise ValueError("ZSHPO_JOBS must be an integer") from None
    for key, value in vars(args).items():
        if key in ("config", "func", "command") or value is None:
            continue
        cfg[key] = value
    return cfg


def _validate_common(cfg: dict) -> None:
    if cfg["normalization"] not in NORMALIZATION_SCHEMES:
        raise ValueError(f"unknown normalization scheme {cfg['normalization']!r}")
    if cfg["normalization"] != "red":
        raise ValueError(
            "the selection methods are defined on the 'red' scheme; "
            f"got {cfg['normalization']!r}"
        )
    if cfg["budget"] < 1:
        raise ValueError(f"budget must be positive, got {cfg['budget']}")
    if cfg["k"] < 1:
        raise ValueError(f"k must be positive, got {cfg['k']}")
    if cfg["eta"] < 2:
        raise ValueError(f"eta must be at least 2, got {cfg['eta']}")
    if cfg["n_trees"] < 1:
        raise ValueError(f"n_trees must be positive, got {cfg['n_trees']}")
    if cfg["rho"] is not None and any(r <= 0 for r in cfg["rho"]):
        raise ValueError("rho entries must be positive")


def _echo_config(cfg: dict, command: str, out_dir: Path) -> None:
    payload = {k: v for k, v in sorted(cfg.items()) if v is not None}
    payload["command"] = command
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    if cfg["n_configs"] < 1 or cfg["n_datasets"] < 1:
        raise ValueError("table dimensions must be positive")
    if cfg["noise"] < 0:
        raise ValueError(f"noise must be non-negative, got {cfg['noise']}")
    out_dir = Path(cfg["output_dir"])
    table = synth_table(
        cfg["n_configs"],
        cfg["n_datasets"],
        cfg["planted_k"],
        noise=cfg["noise"],
        seed=cfg["seed"],
    )
    _echo_config(cfg, "synth", out_dir)
    save_table(table, out_dir / "table")
    return 0


# ---------------------------------------------------------------------------
# select


def cmd_select(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    _validate_common(cfg)
    if not cfg["table"]:
        raise ValueError("select needs --table (or 'table' in the config file)")
    name = cfg["method"]
    if not name:
        raise ValueError("select needs --method (or 'method' in the config file)")
    table = load_table(cfg["table"])
    out_dir = Path(cfg["output_dir"])
    _echo_config(cfg, "select", out_dir)

    if name == "obo":
        params = OboParams(K=cfg["k"], n_trees=cfg["n_trees"], seed=cfg["seed"])
        portfolio, trace = obo_run(table, params, cfg["budget"])
        trace.to_csv(out_dir / "trace.csv")
    elif name == "mf":
        portfolio, trace = mf_run(
            table,
            cfg["budget"],
            cfg["k"],
            eta=cfg["eta"],
            rho=cfg["rho"],
            seed=cfg["seed"],
        )
        (out_dir / "trace.csv").write_text(trace.to_csv())
    else:
        spec = MethodSpec(name, cfg["budget"], cfg["n_trees"], cfg["eta"])
        portfolio = run_method(spec, table, cfg["k"], cfg["seed"])
    payload = {
        "method": name,
        "k": cfg["k"],
        "budget": cfg["budget"],
        "seed": cfg["seed"],
        "members": list(portfolio.members),
        "step_losses": [float(x) for x in portfolio.step_losses],
    }
    (out_dir / "portfolio.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_task(payload):
    """One (method, seed, fold) unit, safe to run in a worker process."""
    table_dir, name, budget, n_trees, eta, k, seed, fold = payload
    table = load_table(table_dir)
    spec = MethodSpec(name, budget, n_trees, eta)
    try:
        trace = lodo_fold(table, spec, k, seed, fold)
        return name, seed, fold, [float(x) for x in trace], None
    except Exception as exc:
        return name, seed, fold, None, str(exc)


def _restrict(result: LodoResult, folds: list[int]) -> LodoResult:
    positions = [result.dataset_ids.index(f) for f in folds]
    return LodoResult(
        method=result.method,
        k=result.k,
        seeds=result.seeds,
        dataset_ids=tuple(folds),
        red_traces=result.red_traces[:, positions, :],
        raw_traces=result.raw_traces[:, positions, :],
    )


def _comparison_csv(path: Path, cells_by_method: dict, baseline: str, k: int) -> None:
    header = ["method", "baseline", "n"]
    for j in range(1, k + 1):
        header += [f"k{j}_mean", f"k{j}_stderr"]
    lines = [",".join(header)]
    for name, cells in cells_by_method.items():
        row = [name, baseline, str(cells[0].n)]
        for cell in cells:
            row += [repr(cell.mean_red), repr(cell.std_err)]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    _validate_common(cfg)
    if not cfg["table"]:
        raise ValueError("bench needs --table (or 'table' in the config file)")
    if not cfg["methods"]:
        raise ValueError("bench needs at least one method")
    unknown = [m for m in cfg["methods"] if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods: {', '.join(unknown)}")
    if not cfg["seeds"]:
        raise ValueError("bench needs at least one seed")
    if cfg["jobs"] < 1:
        raise ValueError(f"jobs must be positive, got {cfg['jobs']}")

    table = load_table(cfg["table"])
    if table.n_datasets < 2:
        raise ValueError("benchmarking needs at least 2 datasets")
    reference = reference_losses(table)
    out_dir = Path(cfg["output_dir"])
    _echo_config(cfg, "bench", out_dir)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    seeds = [int(s) for s in cfg["seeds"]]
    k = cfg["k"]
    tasks = [
        (str(cfg["table"]), m, cfg["budget"], cfg["n_trees"], cfg["eta"], k, s, f)
        for m in cfg["methods"]
        for s in seeds
        for f in range(table.n_datasets)
    ]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["jobs"]) as pool:
            outcomes = list(pool.map(_bench_task, tasks))
    else:
        outcomes = []
        for payload in tasks:
            spec = MethodSpec(payload[1], payload[2], payload[3], payload[4])
            try:
                trace = lodo_fold(table, spec, k, payload[6], payload[7])
                outcomes.append(
                    (payload[1], payload[6], payload[7], [float(x) for x in trace], None)
                )
            except Exception as exc:
                outcomes.append((payload[1], payload[6], payload[7], None, str(exc)))

    completed: dict[str, dict[tuple[int, int], list[float]]] = {
        m: {} for m in cfg["methods"]
    }
    failures = []
    for name, seed, fold, trace, error in outcomes:
        if error is None:
            completed[name][(seed, fold)] = trace
        else:
            failures.append({"method": name, "seed": seed, "fold": fold, "error": error})
            print(
                f"warning: method {name} failed on fold {fold} (seed {seed}): {error}",
                file=sys.stderr,
            )
    if failures:
        (out_dir / "failures.json").write_text(
            json.dumps(failures, sort_keys=True, indent=2) + "\n"
        )

    results: dict[str, LodoResult] = {}
    for name in cfg["methods"]:
        folds = [
            f
            for f in range(table.n_datasets)
            if all((s, f) in completed[name] for s in seeds)
        ]
        if not folds:
            raise RuntimeError(f"method {name} completed no folds")
        if len(folds) < table.n_datasets:
            print(
                f"warning: aggregates for {name} use {len(folds)} of "
                f"{table.n_datasets} folds",
                file=sys.stderr,
            )
        raw = np.array([[completed[name][(s, f)] for f in folds] for s in seeds])
        red_traces = red(raw, reference[np.newaxis, folds, np.newaxis])
        results[name] = LodoResult(
            method=name,
            k=k,
            seeds=tuple(seeds),
            dataset_ids=tuple(folds),
            red_traces=red_traces,
            raw_traces=raw,
        )
        for (seed, fold), trace in sorted(completed[name].items()):
            run_payload = {
                "method": name,
                "seed": seed,
                "fold": fold,
                "k": k,
                "raw_trace": trace,
                "red_trace": [float(v) for v in np.asarray(red(np.array(trace), reference[fold]))],
            }
            (runs_dir / f"{name}-fold{fold}-seed{seed}.json").write_text(
                json.dumps(run_payload, sort_keys=True) + "\n"
            )

    _emit_bench_outputs(list(results.values()), out_dir, cfg["aggregate"])
    return 0


def _emit_bench_outputs(results: list[LodoResult], out_dir: Path, mode: str) -> None:
    emit_plot_data(results, out_dir / "aggregate_mean.csv", mode="mean")
    if mode == "p90":
        emit_plot_data(results, out_dir / "aggregate_p90.csv", mode="p90")
    if len(results) > 1:
        baseline = results[0]
        cells_by_method = {}
        for other in results[1:]:
            shared = [f for f in baseline.dataset_ids if f in other.dataset_ids]
            if not shared:
                print(
                    f"warning: no shared folds between {other.method} and "
                    f"{baseline.method}; comparison skipped",
                    file=sys.stderr,
                )
                continue
            cells_by_method[other.method] = compare(
                _restrict(other, shared), _restrict(baseline, shared)
            )
        if cells_by_method:
            _comparison_csv(
                out_dir / "comparison.csv",
                cells_by_method,
                baseline.method,
                baseline.k,
            )


# ---------------------------------------------------------------------------
# report


def cmd_report(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    if not cfg["results"]:
        raise ValueError("report needs --results pointing at a bench output directory")
    runs_dir = Path(cfg["results"]) / "runs"
    if not runs_dir.is_dir():
        raise ValueError(f"{runs_dir} is not a directory")
    # without an explicit output dir the report lands next to its inputs
    if cfg["output_dir"] != DEFAULTS["output_dir"]:
        out_dir = Path(cfg["output_dir"])
    else:
        out_dir = Path(cfg["results"])
    if cfg["aggregate"] not in ("mean", "p90"):
        raise ValueError(f"unknown aggregation mode {cfg['aggregate']!r}")

    grouped: dict[str, dict[tuple[int, int], dict]] = {}
    k = None
    for path in sorted(runs_dir.glob("*.json")):
        run = json.loads(path.read_text())
        grouped.setdefault(run["method"], {})[(run["seed"], run["fold"])] = run
        if k is None:
            k = run["k"]
        elif k != run["k"]:
            raise ValueError("stored runs disagree on portfolio size")
    if not grouped:
        raise ValueError(f"no stored runs under {runs_dir}")

    # keep the original bench method order (its echoed config sits next to
    # the runs) so the comparison baseline stays the same; otherwise sort
    order = sorted(grouped)
    stored_config = Path(cfg["results"]) / "config.json"
    if stored_config.is_file():
        try:
            stored_methods = json.loads(stored_config.read_text()).get("methods", [])
        except json.JSONDecodeError:
            stored_methods = []
        ordered = [m for m in stored_methods if m in grouped]
        order = ordered + [m for m in sorted(grouped) if m not in ordered]

    results = []
    for name in order:
        runs = grouped[name]
        seeds = sorted({s for s, _ in runs})
        folds = sorted(
            {f for _, f in runs if all((s, f) in runs for s in seeds)}
        )
        if not folds:
            raise ValueError(f"method {name} has no fold completed for every seed")
        raw = np.array([[runs[(s, f)]["raw_trace"] for f in folds] for s in seeds])
        red_traces = np.array(
            [[runs[(s, f)]["red_trace"] for f in folds] for s in seeds]
        )
        results.append(
            LodoResult(
                method=name,
                k=k,
                seeds=tuple(seeds),
                dataset_ids=tuple(folds),
                red_traces=red_traces,
                raw_traces=raw,
            )
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit_bench_outputs(results, out_dir, cfg["aggregate"])
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zshpo",
        description="Zero-shot hyperparameter portfolios from performance tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic planted table")
    synth.add_argument("--n-configs", dest="n_configs", type=int)
    synth.add_argument("--n-datasets", dest="n_datasets", type=int)
    synth.add_argument("--planted-k", dest="planted_k", type=int)
    synth.add_argument("--noise", type=float)
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=cmd_synth)

    select = sub.add_parser("select", help="select one portfolio from a table")
    select.add_argument("--table", help="table directory")
    select.add_argument("--method", choices=METHODS)
    select.add_argument("--budget", type=int, help=f"training jobs (default {DEFAULTS['budget']})")
    select.add_argument("--k", type=int, help=f"portfolio size (default {DEFAULTS['k']})")
    select.add_argument("--eta", type=int)
    select.add_argument("--n-trees", dest="n_trees", type=int)
    select.add_argument("--rho", nargs="+", type=float)
    select.add_argument("--seed", type=int)
    select.add_argument("--normalization")
    select.set_defaults(func=cmd_select)

    bench = sub.add_parser("bench", help="leave-one-dataset-out benchmark")
    bench.add_argument("--table")
    bench.add_argument("--methods", nargs="+", metavar="METHOD")
    bench.add_argument("--budget", type=int)
    bench.add_argument("--k", type=int)
    bench.add_argument("--eta", type=int)
    bench.add_argument("--n-trees", dest="n_trees", type=int)
    bench.add_argument("--seeds", nargs="+", type=int)
    bench.add_argument("--aggregate", choices=("mean", "p90"))
    bench.add_argument("--jobs", type=int)
    bench.add_argument("--normalization")
    bench.set_defaults(func=cmd_bench)

    report = sub.add_parser("report", help="re-aggregate stored bench runs")
    report.add_argument("--results", help="bench output directory")
    report.add_argument("--aggregate", choices=("mean", "p90"))
    report.set_defaults(func=cmd_report)

    for p in (synth, select, bench, report):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--output-dir", dest="output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
