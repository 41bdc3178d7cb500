"""Command-line entry point: ``fedssm {run,sweep,verify,analyze}``."""

from __future__ import annotations

import argparse
import csv
import enum
import io
import json
import math
import struct
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analysis, verify
from .config import ConfigError, RunConfig, SweepSpec
from .federation import ClientFailure, ExperimentResult, RoundMetrics, run_experiment

CONFIG_FILE = "config.txt"
METRICS_CSV = "metrics.csv"
METRICS_JSONL = "metrics.jsonl"
MANIFEST = "manifest.json"
MODEL_FILE = "model.bin"
TRACE_FILE = "trace.npz"
SUMMARY_CSV = "summary.csv"
ANALYSIS_JSON = "analysis.json"
HISTOGRAM_CSV = "histogram.csv"


# -- serialization ----------------------------------------------------------------


def format_value(v) -> str:
    """Text form used in CSV cells; floats use their shortest round-trip repr."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def jsonable(v):
    """NaN becomes null and infinities the strings ``"inf"``/``"-inf"``."""
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
    return v


def metrics_csv(rows: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RoundMetrics.CSV_FIELDS)
    for r in rows:
        d = r.as_dict()
        w.writerow(format_value(d[k]) for k in RoundMetrics.CSV_FIELDS)
    return buf.getvalue()


def metrics_jsonl(rows: list[RoundMetrics]) -> str:
    return "".join(json.dumps(jsonable({k: r.as_dict()[k] for k in RoundMetrics.CSV_FIELDS})) + "\n" for r in rows)


def read_metrics_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def serialize_params(params: np.ndarray) -> bytes:
    """``u64 d`` followed by ``d`` float64 values, little-endian."""
    params = np.asarray(params, dtype="<f8")
    return struct.pack("<Q", params.size) + params.tobytes()


def deserialize_params(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ValueError("model file shorter than its length header")
    (d,) = struct.unpack_from("<Q", data)
    if len(data) != 8 + 8 * d:
        raise ValueError(f"model file holds {(len(data) - 8) / 8:g} values, header says {d}")
    return np.frombuffer(data, "<f8", d, 8).astype(np.float64)


# -- run ------------------------------------------------------------------------


def write_run(cfg: RunConfig, out: Path) -> ExperimentResult:
    """Execute one run and write every artifact under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    keep_states = not math.isinf(cfg.clip)
    res = run_experiment(cfg, keep_states=keep_states)
    text = cfg.to_text()
    (out / CONFIG_FILE).write_text(text)
    (out / METRICS_CSV).write_text(metrics_csv(res.metrics))
    (out / METRICS_JSONL).write_text(metrics_jsonl(res.metrics))
    (out / MODEL_FILE).write_bytes(serialize_params(res.params))

    trace = {}
    if res.states:
        trace["M"] = np.stack([s.M for s in res.states])
        trace["V"] = np.stack([s.V for s in res.states])
        trace["t"] = np.array([s.t for s in res.states])
    if res.histogram_updates is not None:
        for key, x in zip(("dW", "dM", "dV"), res.histogram_updates):
            trace[f"hist_{key}"] = x
    if trace:
        np.savez(out / TRACE_FILE, **trace)

    d = res.params.size
    manifest = {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "code_version": __version__,
        "algorithm": cfg.algorithm.value,
        "variant": cfg.variant.value,
        "d": d,
        "k": cfg.hyperparams().resolve_k(d),
        "rounds": cfg.rounds,
        "rho": res.rho,
        "files": sorted(p.name for p in out.iterdir() if p.name != MANIFEST),
    }
    (out / MANIFEST).write_text(json.dumps(jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return res


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed_override", None) is not None:
        changes["seed"] = args.seed_override
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    return cfg.replace(**changes).validate() if changes else cfg


def _report_config_error(exc: ConfigError) -> int:
    for p in exc.problems:
        print(f"config error: {p}", file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
    except ConfigError as exc:
        return _report_config_error(exc)
    try:
        res = write_run(cfg, Path(args.out))
    except ClientFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    last = res.metrics[-1] if res.metrics else None
    if last is not None:
        print(f"{cfg.algorithm.value}: {cfg.rounds} rounds, train_acc={last.train_acc:.4f} "
              f"test_acc={last.test_acc:.4f} uplink_bits={last.uplink_bits_cum}")
    return 0


# -- sweep ----------------------------------------------------------------------


SUMMARY_FIELDS = ("final_train_acc", "final_test_acc", "rounds_to_target", "bits_to_target",
                  "cum_bits", "status", "error")


def summarize(res: ExperimentResult) -> dict:
    rows = res.metrics
    target = res.config.target_accuracy
    test_acc = [r.test_acc for r in rows]
    cum = [r.uplink_bits_cum for r in rows]
    return {
        "final_train_acc": rows[-1].train_acc if rows else math.nan,
        "final_test_acc": rows[-1].test_acc if rows else math.nan,
        "rounds_to_target": _count(analysis.rounds_to_target(test_acc, target)),
        "bits_to_target": _count(analysis.bits_to_target(test_acc, cum, target)),
        "cum_bits": cum[-1] if cum else 0,
    }


def _summary_cell(v) -> str:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return ";".join(map(str, v))
    return format_value(v)


def _count(x: float):
    """Integral counts print without a decimal point; ``inf`` stays a float."""
    return int(x) if math.isfinite(x) else x


def run_sweep(spec: SweepSpec, out: Path, workers: int = 1) -> list[dict]:
    """Run every grid point (concurrently up to ``workers``); failures are recorded."""
    out.mkdir(parents=True, exist_ok=True)
    points = spec.points()
    axis_names = [a for a, _ in spec.axes]

    def job(i):
        values, cfg = points[i]
        row = {"point": f"point_{i:03d}", **{a: values[a] for a in axis_names}}
        if isinstance(cfg, ConfigError):
            return {**row, "status": "invalid", "error": str(cfg)}
        try:
            res = write_run(cfg, out / row["point"])
        except Exception as exc:  # noqa: BLE001 - one bad point must not stop the sweep
            return {**row, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        return {**row, **summarize(res), "status": "ok", "error": ""}

    if workers <= 1:
        rows = [job(i) for i in range(len(points))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, range(len(points))))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["point", *axis_names, *SUMMARY_FIELDS]
    w.writerow(header)
    for r in rows:
        w.writerow(_summary_cell(r.get(h, "")) for h in header)
    (out / SUMMARY_CSV).write_text(buf.getvalue())
    return rows


def cmd_sweep(args) -> int:
    try:
        spec = SweepSpec.load(args.config)
        if args.seed_override is not None:
            spec.base = spec.base.replace(seed=args.seed_override).validate()
    except ConfigError as exc:
        return _report_config_error(exc)
    rows = run_sweep(spec, Path(args.out), args.workers or 1)
    bad = [r for r in rows if r["status"] != "ok"]
    print(f"sweep: {len(rows)} points, {len(rows) - len(bad)} ok, {len(bad)} failed")
    for r in bad:
        print(f"  {r['point']}: {r['status']}: {r['error']}", file=sys.stderr)
    return 1 if bad else 0


# -- verify -----------------------------------------------------------------------


def cmd_verify(args) -> int:
    base = None
    if args.config:
        try:
            base = _apply_overrides(RunConfig.load(args.config), args)
        except ConfigError as exc:
            return _report_config_error(exc)
    results = verify.run_all(base)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"verify: failing properties: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# -- analyze ----------------------------------------------------------------------


def _num(cell: str) -> float:
    return float(cell) if cell not in ("", "nan") else math.nan


def analyze_run(run_dir: Path) -> dict:
    """Diagnostics computed from a run directory's recorded artifacts only."""
    cfg = RunConfig.load(run_dir / CONFIG_FILE)
    manifest = json.loads((run_dir / MANIFEST).read_text())
    rows = read_metrics_csv(run_dir / METRICS_CSV)
    trace = dict(np.load(run_dir / TRACE_FILE)) if (run_dir / TRACE_FILE).exists() else {}
    d, k = int(manifest["d"]), int(manifest["k"])
    report: dict = {}

    test_acc = [_num(r["test_acc"]) for r in rows]
    cum = [int(r["uplink_bits_cum"]) for r in rows]
    report["summary"] = {
        "config_hash_matches": manifest["config_sha256"] == cfg.digest(),
        "rows": len(rows),
        "rows_match_rounds": len(rows) == cfg.rounds,
        "final_train_acc": _num(rows[-1]["train_acc"]) if rows else math.nan,
        "final_test_acc": test_acc[-1] if rows else math.nan,
        "target_accuracy": cfg.target_accuracy,
        "rounds_to_target": analysis.rounds_to_target(test_acc, cfg.target_accuracy),
        "bits_to_target": analysis.bits_to_target(test_acc, cum, cfg.target_accuracy),
        "cum_bits": cum[-1] if cum else 0,
    }

    expected = analysis.uplink_total(cfg.algorithm, cfg.clients, d, k, cfg.q)
    recorded = sorted({int(r["uplink_bits_round"]) for r in rows})
    report["bit_accounting"] = {"expected_per_round": expected, "recorded_per_round": recorded,
                                "matches": recorded in ([], [expected])}

    if math.isinf(cfg.clip):
        report["lemma1"] = {"status": "premise unmet: clipping disabled"}
    elif "M" in trace:
        states = [_TraceState(int(t), m, v) for t, m, v in zip(trace["t"], trace["M"], trace["V"])]
        report["lemma1"] = {"status": "checked",
                            **analysis.lemma1_monitor(states, cfg.beta1, cfg.beta2, cfg.local_epochs, cfg.clip)}
    else:
        report["lemma1"] = {"status": "no moment trace recorded"}

    if cfg.probe_deviation:
        report["deviation_bound"] = {
            "violations": sum(int(r["bound_violations"]) for r in rows),
            "vacuous_rounds": sum(r["bound_vacuous"] == "true" for r in rows),
            "max_deviation": max((_num(r["max_deviation"]) for r in rows), default=math.nan),
            "max_bound": max((_num(r["max_bound"]) for r in rows), default=math.nan),
            "rho": manifest.get("rho"),
        }

    rho = manifest.get("rho") if manifest.get("rho") is not None else cfg.rho
    if math.isinf(cfg.clip):
        report["prop1"] = {"status": "premise unmet: clipping disabled"}
    elif rho is None:
        report["prop1"] = {"status": "rho not recorded (enable probe_deviation or set rho)"}
    else:
        x = analysis.BoundInputs(cfg.eta, cfg.beta1, cfg.beta2, cfg.eps, float(rho), cfg.clip, d,
                                 cfg.local_epochs, float(cfg.batch_size))
        try:
            report["prop1"] = {"status": "evaluated", **analysis.prop1_check(x)}
        except analysis.BoundOverflowError as exc:
            report["prop1"] = {"status": str(exc)}

    if cfg.probe_gradnorm:
        mean, series = analysis.gradnorm_series([_num(r["gradnorm_sq"]) for r in rows])
        report["gradnorm"] = {"mean_sq_norm": mean, "series": series}

    if "hist_dW" in trace:
        h = analysis.magnitude_histogram(trace["hist_dW"], trace["hist_dM"], trace["hist_dV"],
                                         cfg.histogram_bins)
        (run_dir / HISTOGRAM_CSV).write_text(h.to_csv())
        report["histogram"] = {"round": cfg.histogram_round, "medians_log10": h.medians, "empty": h.empty,
                               "csv": HISTOGRAM_CSV}
    return report


class _TraceState:
    def __init__(self, t, M, V):
        self.t, self.M, self.V = t, M, V


def cmd_analyze(args) -> int:
    run_dir = Path(args.out)
    try:
        report = {run_dir.name: analyze_run(run_dir)}
    except (OSError, ConfigError, KeyError) as exc:
        print(f"analyze failed: {exc}", file=sys.stderr)
        return 1
    text = json.dumps(jsonable(report), indent=2, sort_keys=True) + "\n"
    (run_dir / ANALYSIS_JSON).write_text(text)
    print(text, end="")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedssm", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="config file (key = value lines)")
        p.add_argument("--workers", type=int, default=None, help="thread count")
        p.add_argument("--seed-override", type=int, default=None, help="replace the config's seed")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of experiments")
    common(p)
    p.add_argument("--out", required=True, help="sweep directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the built-in property suite")
    common(p, config_required=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("analyze", help="diagnostics for an existing run directory")
    p.add_argument("--out", required=True, help="run directory to analyze")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
