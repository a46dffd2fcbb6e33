"""End-to-end decode loop: evaluate, select, fetch, attend; metrics and reports.

One run walks a trace step by step, layer by layer.  Per layer it refreshes
chunk bounds, picks the exact top-k tokens for each head, moves their KV
through the tiers (with full byte accounting), computes the attention output
over the selected set, and prices the step under the three overlap modes.
Everything is deterministic given (config, trace): reports are byte-identical
across reruns.
"""

from __future__ import annotations

import dataclasses
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kvtier.chunk_tree import ChunkPlanConfig, Partition, build_partition, next_pow2, select_top_k
from kvtier.importance import attention_logits, score_tokens, softmax
from kvtier.pipeline import (
    MODES,
    LayerLoad,
    PipelineParams,
    StepSchedule,
    build_schedule,
    schedule_rows,
)
from kvtier.tiered_store import (
    LEDGER_COLUMNS,
    TierConfig,
    TieredStore,
    kv_nbytes,
    place_initial,
)
from kvtier.trace import AttentionTrace, read_trace

MIB = float(1 << 20)

# cumulative ablation rows: each row keeps the previous row's features on
ABLATION_ROWS = (
    ("baseline", frozenset()),
    ("+LKA", frozenset({"lka"})),
    ("+IAKM", frozenset({"lka", "iakm"})),
    ("ALL", frozenset({"lka", "iakm", "dtp"})),
)


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on besides the trace bytes themselves."""

    trace_path: str
    plan: ChunkPlanConfig = field(default_factory=ChunkPlanConfig)
    tier: TierConfig | None = None  # None: sized from the trace (cold_dir is always replaced)
    pipe: PipelineParams = field(default_factory=PipelineParams)
    importance_rate: float = 0.10
    early_layer_rate: float = 0.50
    placement_chunk: int = 64  # token granularity of tier records
    iakm: bool = True  # adaptive chunk-tree evaluation (off: score every token)
    lka: bool = True  # selective cold transmission (off: fetch all cold KV each step)
    dtp: bool = True  # compression-split overlap (off: serial "none" schedule)
    seed: int = 0

    def __post_init__(self):
        for name in ("importance_rate", "early_layer_rate"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.placement_chunk < 1:
            raise ValueError("placement_chunk must be >= 1")

    @property
    def mode(self) -> str:
        return "dtp" if self.dtp else "none"

    def rate_for_layer(self, layer: int) -> float:
        if layer < self.plan.early_layers:
            return self.early_layer_rate
        return self.importance_rate

    def echo(self) -> dict:
        """Path-free config dictionary for report headers."""
        out = {
            "importance_rate": self.importance_rate,
            "early_layer_rate": self.early_layer_rate,
            "placement_chunk": self.placement_chunk,
            "iakm": self.iakm,
            "lka": self.lka,
            "dtp": self.dtp,
            "mode": self.mode,
            "seed": self.seed,
            "plan": {
                "default_chunk_size": self.plan.default_chunk_size,
                "early_chunk_size": self.plan.early_chunk_size,
                "early_layers": self.plan.early_layers,
                "early_steps_fraction": self.plan.early_steps_fraction,
                "rho": list(self.plan.rho) if self.plan.rho is not None else None,
            },
            "pipe": dataclasses.asdict(self.pipe),
        }
        if self.tier is not None:
            tier = dataclasses.asdict(self.tier)
            tier.pop("cold_dir")  # engine-managed; paths never enter reports
            out["tier"] = tier
        else:
            out["tier"] = None
        return out


def default_tier(trace: AttentionTrace, placement_chunk: int, cold_dir: str | Path,
                 early_layers_pinned: int = 2) -> TierConfig:
    """Size tiers from the trace: hot = pinned + 25% of the rest, warm = 25%.

    Capacities are quantized up to whole records so placement never wedges on a
    fractional record; roughly half of the non-pinned KV starts cold.
    """
    h = trace.header
    pinned = min(early_layers_pinned, h.n_layers)
    rec = kv_nbytes(placement_chunk, h.head_dim)
    per_lane = kv_nbytes(h.n_context, h.head_dim)
    pinned_bytes = pinned * h.n_heads * per_lane
    rest = (h.n_layers - pinned) * h.n_heads * per_lane

    def quantize(nbytes: float) -> int:
        return max(rec, int(math.ceil(nbytes / rec)) * rec)

    return TierConfig(
        hot_capacity=pinned_bytes + quantize(0.25 * rest) if rest else pinned_bytes + rec,
        warm_capacity=quantize(0.25 * rest),
        cold_dir=cold_dir,
        early_layers_pinned=pinned,
    )


# -- attention output -----------------------------------------------------------------


def attention_output(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Softmax-weighted value sum over exactly the given keys."""
    if values is None:
        raise ValueError("attention output requires value vectors")
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape != values.shape:
        raise ValueError(f"keys shape {keys.shape} != values shape {values.shape}")
    weights = softmax(attention_logits(np.asarray(query, dtype=np.float64), keys))
    return weights @ values


def oracle_output(query: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Full-cache attention output (same arithmetic, whole key set)."""
    return attention_output(query, keys, values)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))


def desert_rate_on_grid(selected: set[int], n: int, grid: int) -> float:
    """Fraction of fixed-size chunks containing no selected token."""
    n_cells = math.ceil(n / grid)
    important = {t // grid for t in selected}
    return 1.0 - len(important) / n_cells


def _token_runs(tokens: list[int]) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for t in sorted(tokens):
        if runs and runs[-1][1] == t:
            runs[-1] = (runs[-1][0], t + 1)
        else:
            runs.append((t, t + 1))
    return runs


# -- per-run state ---------------------------------------------------------------------


@dataclass
class _LaneSource:
    """Cold-tier hook handed to the selector: real store traffic, exact keys.

    The store moves (and bills) whole fp16 records; the numbers the selector
    sees are always the widened f32 trace keys, so exactness never depends on
    payload precision.
    """

    store: TieredStore
    layer: int
    head: int
    keys: np.ndarray  # float64 [n, d]

    def fetch(self, start: int, end: int) -> np.ndarray:
        spans = [s for s in self.store.cold_spans(self.layer, self.head)
                 if s[0] < end and start < s[1]]
        for s in spans:
            self.store.fetch_chunk(self.layer, self.head, *s)
        return self.keys[start:end]


def _mark_cold(partition: Partition, cold_spans: list[tuple[int, int]]) -> None:
    """Re-flag leaves whose records churned back to the cold tier."""
    if not cold_spans:
        return
    for leaf in partition.real_leaves():
        lo, hi = leaf.start, min(leaf.end, partition.n_real)
        if any(s < hi and lo < e for s, e in cold_spans):
            leaf.abstract_only = True
            leaf.residency = "cold"


STEP_COLUMNS = (
    "step", "layer", "recall", "eval_count", "desert_rate", "output_similarity",
    "dropped_mass", "abstract_bytes", "cold_to_warm", "warm_to_hot", "hot_to_warm",
    "r", "latency_none_ms", "latency_prefetch_ms", "latency_dtp_ms", "latency_ms",
)


@dataclass(frozen=True)
class StepRow:
    """One steps.csv row: metrics for a single (step, layer)."""

    step: int
    layer: int
    recall: float
    eval_count: float  # mean per head
    desert_rate: float
    output_similarity: float  # nan when the trace has no values
    dropped_mass: float  # nan when the trace has no values
    abstract_bytes: int
    cold_to_warm: int
    warm_to_hot: int
    hot_to_warm: int
    r: float
    latency_none_ms: float
    latency_prefetch_ms: float
    latency_dtp_ms: float
    latency_ms: float  # active mode

    def as_list(self) -> list:
        return [getattr(self, c) for c in STEP_COLUMNS]


@dataclass
class RunReport:
    trace_info: dict
    config_echo: dict
    mode: str
    rows: list[StepRow]
    schedules: list[StepSchedule]  # active mode, one per step
    ledger_rows: list
    store: TieredStore
    totals: dict[str, float]  # per mode, summed across steps

    def aggregates(self) -> list[dict]:
        """mean/p95 per numeric steps.csv column, in column order."""
        out = []
        for col in STEP_COLUMNS[2:]:
            vals = np.array([getattr(r, col) for r in self.rows], dtype=np.float64)
            mean = float(np.mean(vals))
            p95 = float(np.percentile(vals, 95))
            out.append({
                "record": "metric",
                "name": col,
                "mean": None if math.isnan(mean) else mean,
                "p95": None if math.isnan(p95) else p95,
            })
        return out


def run(config: RunConfig, work_dir: str | Path | None = None) -> RunReport:
    """Execute the decode loop over the whole trace; see the module docstring."""
    if work_dir is None:
        with tempfile.TemporaryDirectory(prefix="kvtier-run-") as td:
            return run(config, td)

    trace = read_trace(config.trace_path)
    h = trace.header
    n, d = h.n_context, h.head_dim

    cold_dir = Path(work_dir) / "cold"
    if config.tier is not None:
        tier = dataclasses.replace(config.tier, cold_dir=cold_dir)
    else:
        tier = default_tier(trace, config.placement_chunk, cold_dir)
    store = place_initial(trace, tier, chunk_size=config.placement_chunk)

    # exact f64 working copies, one per lane
    keys64 = trace.keys.astype(np.float64)
    values64 = trace.values.astype(np.float64) if trace.values is not None else None

    partitions: dict[tuple[int, int], Partition] = {}
    rows: list[StepRow] = []
    schedules: list[StepSchedule] = []
    totals = {m: 0.0 for m in MODES}

    for step in range(h.n_steps):
        loads: list[LayerLoad] = []
        per_layer: list[dict] = []
        for layer in range(h.n_layers):
            row = store.open_row(step, layer)
            k = math.ceil(config.rate_for_layer(layer) * n)
            grid = config.plan.chunk_size_for(layer, step, h.n_steps, n)

            recall_h, eval_h, desert_h, sim_h, drop_h = [], [], [], [], []
            for head in range(h.n_heads):
                lane_keys = keys64[layer, head]
                query = trace.queries[step, layer, head].astype(np.float64)

                if not config.lka:  # indiscriminate transmission: everything cold moves
                    for span in list(store.cold_spans(layer, head)):
                        store.fetch_chunk(layer, head, *span)

                if config.iakm:
                    store.load_abstracts(layer, head)
                    part = partitions.get((layer, head))
                    if part is None:
                        size = min(grid, next_pow2(n))
                        part = build_partition(n, next_pow2(n) // size, keys=lane_keys.copy())
                        partitions[(layer, head)] = part
                    _mark_cold(part, store.cold_spans(layer, head))
                    source = _LaneSource(store, layer, head, part.keys)
                    res = select_top_k(part, query, k, store=source)
                    selected = res.important_tokens
                    eval_count = res.eval_count
                else:
                    scores = score_tokens(query, lane_keys)
                    order = np.lexsort((np.arange(n), -scores))
                    selected = [int(t) for t in order[:k]]
                    eval_count = n

                store.touch(layer, head, selected)
                store.ensure_hot(layer, head, _token_runs(selected))

                scores = score_tokens(query, lane_keys)
                order = np.lexsort((np.arange(n), -scores))
                oracle = {int(t) for t in order[:k]}
                recall_h.append(len(oracle & set(selected)) / k if k else 1.0)
                eval_h.append(eval_count)
                desert_h.append(desert_rate_on_grid(set(selected), n, grid))

                if values64 is not None:
                    sel = np.array(sorted(selected), dtype=np.intp)
                    out_sel = attention_output(query, lane_keys[sel], values64[layer, head][sel])
                    out_full = oracle_output(query, lane_keys, values64[layer, head])
                    sim_h.append(cosine_similarity(out_sel, out_full))
                    drop_h.append(1.0 - float(np.sum(softmax(scores)[sel])))

            ledger = store.close_row()
            eval_total = float(sum(eval_h))
            loads.append(LayerLoad(
                d_cold=ledger.cold_to_warm / MIB,
                d_warm=ledger.warm_to_hot / MIB,
                eval_ms=eval_total * config.pipe.eval_ms_per_op,
            ))
            per_layer.append({
                "recall": float(np.mean(recall_h)),
                "eval_count": float(np.mean(eval_h)),
                "desert_rate": float(np.mean(desert_h)),
                "output_similarity": float(np.mean(sim_h)) if sim_h else math.nan,
                "dropped_mass": float(np.mean(drop_h)) if drop_h else math.nan,
                "ledger": ledger,
            })

        by_mode = {m: build_schedule(loads, config.pipe, m) for m in MODES}
        active = by_mode[config.mode]
        schedules.append(active)
        for m in MODES:
            totals[m] += by_mode[m].total_ms
        lat = {m: by_mode[m].layer_latencies() for m in MODES}
        for layer, info in enumerate(per_layer):
            ledger = info["ledger"]
            rows.append(StepRow(
                step=step,
                layer=layer,
                recall=info["recall"],
                eval_count=info["eval_count"],
                desert_rate=info["desert_rate"],
                output_similarity=info["output_similarity"],
                dropped_mass=info["dropped_mass"],
                abstract_bytes=ledger.abstract_bytes,
                cold_to_warm=ledger.cold_to_warm,
                warm_to_hot=ledger.warm_to_hot,
                hot_to_warm=ledger.hot_to_warm,
                r=ledger.r,
                latency_none_ms=lat["none"][layer],
                latency_prefetch_ms=lat["prefetch"][layer],
                latency_dtp_ms=lat["dtp"][layer],
                latency_ms=lat[config.mode][layer],
            ))

    store.check_invariants()
    trace_info = {
        "n_layers": h.n_layers, "n_heads": h.n_heads, "head_dim": h.head_dim,
        "n_context": h.n_context, "n_steps": h.n_steps, "has_values": h.has_values,
    }
    return RunReport(
        trace_info=trace_info,
        config_echo=config.echo(),
        mode=config.mode,
        rows=rows,
        schedules=schedules,
        ledger_rows=list(store.ledger_rows),
        store=store,
        totals=totals,
    )


# -- reports ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    """Write steps.csv, summary.json-lines, schedule.csv, ledger.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    steps_path = out / "steps.csv"
    with open(steps_path, "w", newline="") as fh:
        fh.write(",".join(STEP_COLUMNS) + "\n")
        for row in report.rows:
            fh.write(",".join(_fmt(v) for v in row.as_list()) + "\n")
    paths["steps"] = steps_path

    summary_path = out / "summary.json-lines"
    with open(summary_path, "w") as fh:
        head = {
            "record": "run",
            "trace": report.trace_info,
            "config": report.config_echo,
            "n_rows": len(report.rows),
        }
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for line in report.aggregates():
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        tail = {
            "record": "latency",
            "mode": report.mode,
            **{m: report.totals[m] for m in MODES},
            "active_total_ms": report.totals[report.mode],
        }
        fh.write(json.dumps(tail, sort_keys=True) + "\n")
    paths["summary"] = summary_path

    schedule_path = out / "schedule.csv"
    with open(schedule_path, "w", newline="") as fh:
        from kvtier.pipeline import SCHEDULE_COLUMNS

        fh.write(",".join(SCHEDULE_COLUMNS) + "\n")
        for step, sched in enumerate(report.schedules):
            for row in schedule_rows(step, sched):
                fh.write(",".join(str(v) for v in row) + "\n")
    paths["schedule"] = schedule_path

    ledger_path = out / "ledger.csv"
    report.store.write_ledger(ledger_path)
    paths["ledger"] = ledger_path
    return paths


def run_and_report(config: RunConfig, out_dir: str | Path) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run(config, work_dir=out)
    write_report(report, out)
    return report


# -- ablation ----------------------------------------------------------------------------


def ablate(config: RunConfig, work_dir: str | Path | None = None) -> list[tuple[str, RunReport]]:
    """Run the cumulative feature ladder; each row gets a fresh store."""
    if work_dir is None:
        with tempfile.TemporaryDirectory(prefix="kvtier-ablate-") as td:
            return ablate(config, td)
    out = []
    for label, flags in ABLATION_ROWS:
        variant = dataclasses.replace(
            config, iakm="iakm" in flags, lka="lka" in flags, dtp="dtp" in flags
        )
        row_dir = Path(work_dir) / label.replace("+", "plus-").lower()
        row_dir.mkdir(parents=True, exist_ok=True)
        out.append((label, run(variant, work_dir=row_dir)))
    return out


ABLATE_COLUMNS = (
    "row", "iakm", "lka", "dtp", "mean_eval_count", "mean_desert_rate", "mean_r",
    "total_none_ms", "total_prefetch_ms", "total_dtp_ms", "total_ms",
)


def ablation_table(results: list[tuple[str, RunReport]]) -> list[list]:
    table = []
    for label, rep in results:
        cfg = rep.config_echo
        mean = lambda col: float(np.mean([getattr(r, col) for r in rep.rows]))
        table.append([
            label, cfg["iakm"], cfg["lka"], cfg["dtp"],
            mean("eval_count"), mean("desert_rate"), mean("r"),
            rep.totals["none"], rep.totals["prefetch"], rep.totals["dtp"],
            rep.totals[rep.mode],
        ])
    return table


def write_ablation(results: list[tuple[str, RunReport]], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ablate.csv"
    with open(path, "w", newline="") as fh:
        fh.write(",".join(ABLATE_COLUMNS) + "\n")
        for row in ablation_table(results):
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path
