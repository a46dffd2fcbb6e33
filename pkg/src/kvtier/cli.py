"""Command-line front end: generate, validate, run, ablate, solve-theta, calibrate, report.

Exit codes: 0 success, 1 operational failure or validation findings, 2 usage
error.  ``KVTIER_SEED`` is the seed fallback when ``--seed`` is absent.  Run
configuration may come from a flat ``key = value`` file (keys named after
RunConfig fields, nested fields as ``plan.x`` / ``tier.x`` / ``pipe.x``);
explicit flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from kvtier.chunk_tree import ChunkPlanConfig
from kvtier.engine import (
    RunConfig,
    ablate,
    ablation_table,
    run_and_report,
    write_ablation,
    write_report,
)
from kvtier.pipeline import PipelineParams, calibrate_host, solve_theta, write_calibration
from kvtier.tiered_store import TierConfig
from kvtier.trace import DesertProfile, TraceHeader, generate_synthetic, validate_trace, write_trace

_MANAGED = "<managed>"  # placeholder: the engine replaces cold_dir per run


class CliError(Exception):
    """Operational failure: printed as one line, exits 1."""


def _env_seed() -> int:
    raw = os.environ.get("KVTIER_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"KVTIER_SEED must be an integer, got {raw!r}") from exc


# -- config file -----------------------------------------------------------------------

_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}

_TOP_FIELDS = {
    "trace_path": str, "importance_rate": float, "early_layer_rate": float,
    "placement_chunk": int, "iakm": bool, "lka": bool, "dtp": bool, "seed": int,
}
_PLAN_FIELDS = {
    "default_chunk_size": int, "early_chunk_size": int, "early_layers": int,
    "early_steps_fraction": float, "rho": "float_list",
}
_TIER_FIELDS = {
    "hot_capacity": int, "warm_capacity": int, "bandwidth_hot_warm": float,
    "bandwidth_warm_cold": float, "early_layers_pinned": int,
    "hot_frequency_threshold": int, "frequency_window": int,
}
_PIPE_FIELDS = {
    "compute_ms": float, "overhead_ms": float, "bw_hot_warm": float,
    "bw_warm_cold": float, "compress_ratio": float, "decompress_rate": float,
    "eval_ms_per_op": float,
}


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        if typ == "float_list":
            if raw.strip().lower() in ("", "none"):
                return None
            return tuple(float(x) for x in raw.split(","))
        return typ(raw)
    except ValueError as exc:
        raise CliError(f"config key {key}: {exc}") from exc


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Flat `key = value` file into a typed {key: value} dict (dotted keys kept)."""
    values: dict[str, object] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in _TOP_FIELDS:
            typ = _TOP_FIELDS[key]
        elif key.startswith("plan.") and key[5:] in _PLAN_FIELDS:
            typ = _PLAN_FIELDS[key[5:]]
        elif key.startswith("tier.") and key[5:] in _TIER_FIELDS:
            typ = _TIER_FIELDS[key[5:]]
        elif key.startswith("pipe.") and key[5:] in _PIPE_FIELDS:
            typ = _PIPE_FIELDS[key[5:]]
        elif key == "tier.cold_dir":
            raise CliError(f"{path}:{lineno}: tier.cold_dir is engine-managed; remove it")
        else:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, typ)
    return values


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults <- config file <- explicit flags into a RunConfig."""
    values = parse_config_file(args.config) if args.config else {}

    def flag(name, config_key):
        v = getattr(args, name, None)
        return v if v is not None else values.get(config_key)

    trace = flag("trace", "trace_path")
    if trace is None:
        raise CliError("no trace given: pass --trace or set trace_path in the config file")

    sub = lambda prefix, fields: {
        k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)
    }
    plan_kw = sub("plan.", _PLAN_FIELDS)
    tier_kw = sub("tier.", _TIER_FIELDS)
    pipe_kw = sub("pipe.", _PIPE_FIELDS)

    try:
        plan = ChunkPlanConfig(**plan_kw) if plan_kw else ChunkPlanConfig()
        pipe = PipelineParams(**pipe_kw) if pipe_kw else PipelineParams()
        tier = None
        if tier_kw:
            if "hot_capacity" not in tier_kw or "warm_capacity" not in tier_kw:
                raise CliError(
                    "tier.* config needs both tier.hot_capacity and tier.warm_capacity"
                )
            tier = TierConfig(cold_dir=_MANAGED, **tier_kw)

        seed = flag("seed", "seed")
        kwargs = dict(
            trace_path=str(trace), plan=plan, tier=tier, pipe=pipe,
            seed=_env_seed() if seed is None else int(seed),
        )
        for name in ("importance_rate", "early_layer_rate", "placement_chunk",
                     "iakm", "lka", "dtp"):
            v = flag(name, name)
            if v is not None:
                kwargs[name] = v
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise CliError(str(exc)) from exc


# -- subcommands -----------------------------------------------------------------------


def _cmd_gen_trace(args) -> int:
    seed = _env_seed() if args.seed is None else args.seed
    header = TraceHeader(
        n_layers=args.layers, n_heads=args.heads, head_dim=args.dim,
        n_context=args.n, n_steps=args.steps, has_values=args.values,
    )
    profile = DesertProfile(
        desert_rate=args.desert_rate, n_hot_regions=args.hot_regions,
        score_gap=args.score_gap, seed=seed,
    )
    trace = generate_synthetic(profile, header)
    nbytes = write_trace(trace, args.out)
    print(f"wrote {args.out}: {nbytes} bytes "
          f"({args.layers}x{args.heads}x{args.n}x{args.dim}, {args.steps} steps, seed {seed})")
    return 0


def _cmd_validate(args) -> int:
    findings = validate_trace(args.trace)
    if findings:
        for finding in findings:
            print(finding)
        return 1
    print(f"OK: {args.trace}")
    return 0


def _print_run_summary(report) -> None:
    rows = report.rows
    mean = lambda col: float(np.mean([getattr(r, col) for r in rows]))
    print(f"rows: {len(rows)}  mode: {report.mode}")
    print(f"mean recall          {mean('recall'):.6g}")
    print(f"mean eval_count      {mean('eval_count'):.6g}")
    print(f"mean desert_rate     {mean('desert_rate'):.6g}")
    print(f"mean r               {mean('r'):.6g}")
    for m in ("none", "prefetch", "dtp"):
        marker = " *" if m == report.mode else ""
        print(f"total latency {m:<8} {report.totals[m]:.6g} ms{marker}")


def _cmd_run(args) -> int:
    config = build_run_config(args)
    report = run_and_report(config, args.out)
    _print_run_summary(report)
    print(f"reports in {args.out}: steps.csv summary.json-lines schedule.csv ledger.csv")
    return 0


def _cmd_ablate(args) -> int:
    config = build_run_config(args)
    results = ablate(config, work_dir=args.out)
    for label, rep in results:
        write_report(rep, Path(args.out) / label.replace("+", "plus-").lower())
    path = write_ablation(results, args.out)
    widths = (10, 6, 6, 6, 16, 17, 10, 14)
    header = ("row", "iakm", "lka", "dtp", "mean_eval_count", "mean_desert_rate",
              "mean_r", "total_ms")
    print("  ".join(f"{h:<{w}}" for h, w in zip(header, widths)))
    for row in ablation_table(results):
        cells = row[:4] + [f"{row[4]:.6g}", f"{row[5]:.6g}", f"{row[6]:.6g}", f"{row[10]:.6g}"]
        print("  ".join(f"{str(c):<{w}}" for c, w in zip(cells, widths)))
    print(f"table written to {path}")
    return 0


def _cmd_solve_theta(args) -> int:
    try:
        params = PipelineParams(
            compute_ms=args.Tc, overhead_ms=args.T0, bw_hot_warm=args.B,
            compress_ratio=args.delta, decompress_rate=args.decompress_rate,
        )
        sol = solve_theta(args.D, params)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(f"theta = {sol.theta:.6g}")
    print(f"feasible = {str(sol.feasible).lower()}")
    print(f"residual_ms = {sol.residual_ms:.6g}")
    return 0


def _cmd_calibrate(args) -> int:
    out = Path(args.out)
    profile = calibrate_host(out.parent if out.parent != Path("") else Path("."),
                             payload_bytes=args.payload_bytes, seed=args.seed or 0)
    write_calibration(profile, out)
    for key in ("payload_bytes", "bw_warm_cold", "decompress_rate", "compress_ratio"):
        print(f"{key} = {profile[key]:.6g}" if isinstance(profile[key], float)
              else f"{key} = {profile[key]}")
    print(f"profile written to {out}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary = run_dir / "summary.json-lines"
    if not summary.is_file():
        raise CliError(f"no summary.json-lines under {run_dir}")
    lines = [json.loads(line) for line in summary.read_text().splitlines()]
    head = lines[0]
    trace, config = head["trace"], head["config"]
    print(f"trace: {trace['n_layers']}x{trace['n_heads']} layers/heads, "
          f"{trace['n_context']} tokens, {trace['n_steps']} steps")
    print(f"mode: {config['mode']}  importance_rate: {config['importance_rate']}")
    print(f"{'metric':<22} {'mean':>14} {'p95':>14}")
    for line in lines:
        if line.get("record") != "metric":
            continue
        fmt = lambda v: "-" if v is None else f"{v:.6g}"
        print(f"{line['name']:<22} {fmt(line['mean']):>14} {fmt(line['p95']):>14}")
    tail = lines[-1]
    if tail.get("record") == "latency":
        print(f"{'total latency (ms)':<22} none={tail['none']:.6g} "
              f"prefetch={tail['prefetch']:.6g} dtp={tail['dtp']:.6g} "
              f"active={tail['active_total_ms']:.6g}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvtier",
        description="Importance-aware tiered KV-cache management simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-trace", help="generate a synthetic .kvtr trace")
    gen.add_argument("--n", type=int, required=True, help="context tokens")
    gen.add_argument("--layers", type=int, required=True, help="transformer layers")
    gen.add_argument("--heads", type=int, required=True, help="heads per layer")
    gen.add_argument("--dim", type=int, required=True, help="head dimension")
    gen.add_argument("--steps", type=int, required=True, help="decode steps (queries)")
    gen.add_argument("--desert-rate", type=float, default=0.7,
                     help="fraction of low-score tokens (default 0.7)")
    gen.add_argument("--hot-regions", type=int, default=3,
                     help="planted high-score regions per lane (default 3)")
    gen.add_argument("--score-gap", type=float, default=1.0,
                     help="score margin between hot and desert tokens (default 1.0)")
    gen.add_argument("--values", action="store_true", help="include value vectors")
    gen.add_argument("--seed", type=int, default=None,
                     help="RNG seed (default: $KVTIER_SEED or 0)")
    gen.add_argument("-o", "--out", required=True, help="output .kvtr path")
    gen.set_defaults(func=_cmd_gen_trace)

    val = sub.add_parser("validate", help="check a .kvtr file; findings exit 1")
    val.add_argument("trace", help=".kvtr path")
    val.set_defaults(func=_cmd_validate)

    def add_run_flags(p):
        p.add_argument("--trace", default=None, help=".kvtr path (or trace_path in config)")
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--importance-rate", type=float, default=None, dest="importance_rate",
                       help="fraction of tokens selected per layer (default 0.10)")
        p.add_argument("--early-layer-rate", type=float, default=None, dest="early_layer_rate",
                       help="selection fraction for early layers (default 0.50)")
        p.add_argument("--placement-chunk", type=int, default=None, dest="placement_chunk",
                       help="tier record granularity in tokens (default 64)")
        p.add_argument("--seed", type=int, default=None,
                       help="seed echoed into reports (default: $KVTIER_SEED or 0)")

    runp = sub.add_parser("run", help="run the decode loop over a trace and write reports")
    add_run_flags(runp)
    for name in ("iakm", "lka", "dtp"):
        runp.add_argument(f"--{name}", action=argparse.BooleanOptionalAction, default=None,
                          help=f"toggle {name} (default on)")
    runp.set_defaults(func=_cmd_run)

    ab = sub.add_parser("ablate", help="run the cumulative feature ladder; write ablate.csv")
    add_run_flags(ab)
    ab.set_defaults(func=_cmd_ablate)

    st = sub.add_parser("solve-theta", help="smallest compressed fraction hiding a transfer")
    st.add_argument("--D", type=float, required=True, help="transfer volume")
    st.add_argument("--B", type=float, required=True, help="bandwidth (volume/ms)")
    st.add_argument("--T0", type=float, required=True, help="fixed per-layer overhead (ms)")
    st.add_argument("--Tc", type=float, required=True, help="per-layer compute time (ms)")
    st.add_argument("--delta", type=float, required=True, help="compressed/original size ratio")
    st.add_argument("--decompress-rate", type=float, required=True, dest="decompress_rate",
                    help="decompression throughput (volume/ms)")
    st.set_defaults(func=_cmd_solve_theta)

    cal = sub.add_parser("calibrate", help="measure disk bandwidth and codec speed")
    cal.add_argument("--out", required=True, help="output profile.json path")
    cal.add_argument("--payload-bytes", type=int, default=1 << 22, dest="payload_bytes",
                     help="probe payload size (default 4 MiB)")
    cal.add_argument("--seed", type=int, default=None, help="probe payload seed")
    cal.set_defaults(func=_cmd_calibrate)

    rep = sub.add_parser("report", help="print the summary table of an existing run")
    rep.add_argument("--run-dir", required=True, dest="run_dir", help="directory with reports")
    rep.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"kvtier {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"kvtier {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
