"""
Report Service Module

Per-block aggregation of attribution reports, statistics over repeated runs,
CSV/JSON export and SVG bar charts. Blocks are always emitted in model order
(conv1 ... head), whatever order they were stored in.
"""

import csv
import io
import json
import math
from pathlib import Path
from typing import List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from forgetloc.models.schemas import (  # noqa: E402
    AttributionReport, BlockKind, BlockStats, FigureMode, LayerAggregate, MultiRunStats
)
from forgetloc.utils.exceptions import ConsistencyError, ExportError, InvalidInputError  # noqa: E402
from forgetloc.utils.logger import logger  # noqa: E402

CSV_COLUMNS = [
    "scenario", "run_count", "block", "kind", "n_elements", "sum_mean", "sum_std",
    "per_element_mean", "per_element_std", "exact_dL_mean", "approx_err_mean",
]

SCENARIO_COLORS = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3"]
# fixed id salt and text-as-text keep the SVG bytes reproducible
SVG_RC = {"svg.hashsalt": "forgetloc", "svg.fonttype": "none"}


def aggregate(report: AttributionReport) -> List[LayerAggregate]:
    """One aggregate per parameter block, in model order"""
    return [
        LayerAggregate(
            block=block.name,
            kind=block.kind,
            position=block.position,
            n_elements=block.n_elements,
            signed_sum=block.delta_sum,
            abs_sum=abs(block.delta_sum),
            mean_per_element=block.delta_sum / block.n_elements,
            abs_element_sum=block.abs_delta_sum
        )
        for block in sorted(report.blocks, key=lambda b: b.position)
    ]


def _std(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def multi_run(reports: Sequence[AttributionReport]) -> MultiRunStats:
    """Per-block mean and sample standard deviation (n-1) across runs.

    A single report is accepted and yields zero spreads.
    """
    if not reports:
        raise InvalidInputError("multi_run needs at least one report")
    per_run = [aggregate(report) for report in reports]
    inventory = [(a.block, a.kind, a.n_elements) for a in per_run[0]]
    for index, aggregates in enumerate(per_run[1:], start=1):
        if [(a.block, a.kind, a.n_elements) for a in aggregates] != inventory:
            raise ConsistencyError(f"run {index} has a different block inventory than run 0")
    scenarios = {report.scenario for report in reports}
    if len(scenarios) > 1:
        raise ConsistencyError(f"reports mix scenarios {sorted(str(s) for s in scenarios)}")
    scenario = next(iter(scenarios))

    blocks = []
    for i, (name, kind, n_elements) in enumerate(inventory):
        sums = np.array([aggregates[i].signed_sum for aggregates in per_run])
        abs_sums = np.abs(sums)
        means = np.array([aggregates[i].mean_per_element for aggregates in per_run])
        blocks.append(BlockStats(
            block=name,
            kind=kind,
            position=per_run[0][i].position,
            n_elements=n_elements,
            sum_mean=float(np.mean(sums)),
            sum_std=_std(sums),
            abs_sum_mean=float(np.mean(abs_sums)),
            abs_sum_std=_std(abs_sums),
            per_element_mean=float(np.mean(means)),
            per_element_std=_std(means)
        ))

    exact = np.array([report.exact_delta for report in reports])
    return MultiRunStats(
        scenario=scenario.value if scenario is not None else "",
        transition=reports[0].transition,
        run_count=len(reports),
        blocks=blocks,
        exact_delta_mean=float(np.mean(exact)),
        exact_delta_std=_std(exact),
        approx_delta_mean=float(np.mean([report.approx_delta for report in reports])),
        relative_error_mean=float(np.mean([report.relative_error for report in reports]))
    )


def _finite_or_none(value: float):
    """NaN and +-inf have no JSON spelling; they export as null / an empty CSV cell"""
    return value if math.isfinite(value) else None


def _rows(stats: MultiRunStats) -> List[dict]:
    return [
        {
            "scenario": stats.scenario,
            "run_count": stats.run_count,
            "block": block.block,
            "kind": block.kind.value,
            "n_elements": block.n_elements,
            "sum_mean": _finite_or_none(block.sum_mean),
            "sum_std": _finite_or_none(block.sum_std),
            "per_element_mean": _finite_or_none(block.per_element_mean),
            "per_element_std": _finite_or_none(block.per_element_std),
            "exact_dL_mean": _finite_or_none(stats.exact_delta_mean),
            "approx_err_mean": _finite_or_none(stats.relative_error_mean),
        }
        for block in sorted(stats.blocks, key=lambda b: b.position)
    ]


def _from_aggregates(aggregates: Sequence[LayerAggregate], scenario: str) -> MultiRunStats:
    blocks = [
        BlockStats(block=a.block, kind=a.kind, position=a.position, n_elements=a.n_elements,
                   sum_mean=a.signed_sum, sum_std=0.0, abs_sum_mean=a.abs_sum, abs_sum_std=0.0,
                   per_element_mean=a.mean_per_element, per_element_std=0.0)
        for a in aggregates
    ]
    total = float(sum(a.signed_sum for a in aggregates))
    return MultiRunStats(scenario=scenario, run_count=1, blocks=blocks, exact_delta_mean=float("nan"),
                         exact_delta_std=0.0, approx_delta_mean=total, relative_error_mean=float("nan"))


def export(data: Union[MultiRunStats, Sequence[LayerAggregate]], fmt: str, path: Union[str, Path],
           scenario: str = "") -> Path:
    """Write statistics (or one run's aggregates) as CSV or JSON with round-trip float precision"""
    stats = data if isinstance(data, MultiRunStats) else _from_aggregates(data, scenario)
    path = Path(path)
    rows = _rows(stats)
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in rows)
        content = buffer.getvalue()
    elif fmt == "json":
        content = json.dumps({"columns": CSV_COLUMNS, "rows": rows}, indent=2, allow_nan=False) + "\n"
    else:
        raise InvalidInputError(f"unsupported export format {fmt!r}")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    except OSError as e:
        raise ExportError(f"could not write {fmt} export ({e})", path) from e
    logger.info(f"Exported {len(rows)} block rows to {path}")
    return path


def emit_figure(stats: Union[MultiRunStats, Sequence[MultiRunStats]], mode: FigureMode,
                path: Union[str, Path]) -> Path:
    """Grouped bar chart with +-1 std error bars; weights and biases on separate panels.

    sum mode plots |sum of contributions| per block, mean mode the signed
    per-element mean. Output bytes are deterministic for identical inputs.
    """
    panels_stats = [stats] if isinstance(stats, MultiRunStats) else list(stats)
    if not panels_stats or not any(s.blocks for s in panels_stats):
        raise InvalidInputError("emit_figure needs non-empty statistics")
    mode = FigureMode(mode)
    # union of blocks over all series (ITL carries one head more than ICL/IDL)
    catalog = {}
    for series in panels_stats:
        for b in series.blocks:
            catalog.setdefault(b.block, b)
    ordered = sorted(catalog.values(), key=lambda b: (b.position, b.block))
    kinds = [kind for kind in (BlockKind.WEIGHT, BlockKind.BIAS) if any(b.kind is kind for b in ordered)]

    path = Path(path)
    with plt.rc_context(SVG_RC):
        fig = _draw_panels(panels_stats, ordered, kinds, mode)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as e:
            raise ExportError(f"could not write figure ({e})", path) from e
        finally:
            plt.close(fig)
    logger.info(f"Figure written to {path}")
    return path


def _draw_panels(panels_stats: List[MultiRunStats], ordered: List[BlockStats], kinds: List[BlockKind],
                 mode: FigureMode):
    fig, axes = plt.subplots(1, len(kinds), figsize=(5 * len(kinds) + 1, 4), squeeze=False)
    width = 0.8 / len(panels_stats)

    for ax, kind in zip(axes[0], kinds):
        kind_names = [b.block for b in ordered if b.kind is kind]
        x = np.arange(len(kind_names))
        for s_index, scenario_stats in enumerate(panels_stats):
            by_name = {b.block: b for b in scenario_stats.blocks}
            value, spread = ("abs_sum_mean", "abs_sum_std") if mode is FigureMode.SUM \
                else ("per_element_mean", "per_element_std")
            heights = [getattr(by_name[n], value) if n in by_name else 0.0 for n in kind_names]
            errors = [getattr(by_name[n], spread) if n in by_name else 0.0 for n in kind_names]
            offset = (s_index - (len(panels_stats) - 1) / 2) * width
            bars = ax.bar(x + offset, heights, width, yerr=errors, capsize=3,
                          color=SCENARIO_COLORS[s_index % len(SCENARIO_COLORS)],
                          label=scenario_stats.scenario or f"series {s_index}")
            for bar, name in zip(bars, kind_names):
                bar.set_gid(f"bar-{scenario_stats.scenario or s_index}-{name}")
        ax.set_xticks(x)
        ax.set_xticklabels([n.rsplit(".", 1)[0] for n in kind_names], rotation=30)
        ax.set_title(f"{kind.value} blocks")
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.set_ylabel("|sum of dL_i|" if mode is FigureMode.SUM else "mean dL_i per element")
        if len(panels_stats) > 1:
            ax.legend(fontsize="small")

    fig.tight_layout()
    return fig
