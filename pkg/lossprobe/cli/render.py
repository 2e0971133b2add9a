"""
Rendering of report artifacts: CSV tables, SVG scatter plots and the CSV
schema document. Everything is derived from the `tables` and `plots`
sections of a report, so `lossprobe report` can rebuild it from report.json
"""

import math
from typing import Any, Dict, List, Mapping, Sequence

import lossprobe.cli.templates as temps
from lossprobe.cli.utils import create_file, table_csv


def fmt_tick(value: float) -> str:
    """Short tick label"""
    return f"{value:.3g}"


temps.env.filters["tick"] = fmt_tick


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


TABLE_DOCS: Dict[str, Dict[str, Any]] = {
    "advantage-vs-max-ce": {
        "description": "One row per (dataset, base model, loss-predictor algorithm) cell, evaluated on the held-out split.",
        "columns": {
            "dataset": "dataset name from the config",
            "family": "base predictor family",
            "algorithm": "loss-predictor regression algorithm",
            "theta": "miscalibration knob: weight of the constant blended into the base model",
            "max_subgroup_ce": "largest calibration error over the named subgroups",
            "max_subgroup": "subgroup attaining max_subgroup_ce",
            "global_ce": "calibration error over all held-out rows",
            "advantage": "squared error of the self-entropy predictor minus that of the loss predictor",
            "noise": "three standard errors of the per-row squared-error difference",
            "n": "held-out rows",
        },
    },
    "subgroup-advantage": {
        "description": "One row per (dataset, base model, subgroup) for the first loss-predictor algorithm.",
        "columns": {
            "dataset": "dataset name from the config",
            "family": "base predictor family",
            "algorithm": "loss-predictor regression algorithm",
            "subgroup": "subgroup name",
            "ce": "calibration error restricted to the subgroup",
            "advantage": "advantage restricted to the subgroup",
            "noise": "three standard errors of the restricted advantage",
            "n": "held-out rows in the subgroup",
        },
    },
    "subgroup-ce": {
        "description": "Calibration error of the audited predictor on each held-out subgroup.",
        "columns": {
            "subgroup": "subgroup name",
            "ce": "calibration error restricted to the subgroup",
            "advantage": "advantage restricted to the subgroup",
            "n": "held-out rows in the subgroup",
        },
    },
    "boost-trace": {
        "description": "One row per boosting update round.",
        "columns": {
            "round": "1-based update round",
            "b": "id of the function from B",
            "a": "id of the learner's hypothesis",
            "correlation": "E[a b (target - p)] on the learner's sample",
            "potential": "mean squared distance to the boosting target after the round",
            "p_star_distance": "mean squared distance to p* after the round (synthetic data only)",
        },
    },
    "basis-fits": {
        "description": "One row per sampled 1-Lipschitz proper loss.",
        "columns": {
            "loss": "sampled loss name",
            "sup_error": "largest fit error on the dense grid",
            "norm": "l1 norm of the basis coefficients",
            "within_bounds": "whether both the epsilon and lambda bounds hold",
        },
    },
}


def _ticks(low: float, high: float, to_pixel, count: int = 5) -> List[Dict[str, Any]]:
    return [
        {"pos": round(to_pixel(value), 2), "value": value}
        for value in (low + (high - low) * k / (count - 1) for k in range(count))
    ]


def scatter_svg(plot: Mapping[str, Any], rows: Sequence[Mapping[str, Any]]) -> str:
    """
    Static scatter of rows[x] against rows[y], colored by rows[series]
    """
    width, height = 520, 380
    left, right, top, bottom = 64, width - 16, 32, height - 44
    xs = [float(r[plot["x"]]) for r in rows]
    ys = [float(r[plot["y"]]) for r in rows]

    def span(values: List[float]) -> tuple[float, float]:
        finite = [v for v in values if math.isfinite(v)]
        if not finite:
            return 0.0, 1.0
        lo, hi = min(finite), max(finite)
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        pad = 0.05 * (hi - lo)
        return lo - pad, hi + pad

    x_lo, x_hi = span(xs)
    y_lo, y_hi = span(ys)

    def px(v: float) -> float:
        return left + (v - x_lo) / (x_hi - x_lo) * (right - left)

    def py(v: float) -> float:
        return bottom - (v - y_lo) / (y_hi - y_lo) * (bottom - top)

    series_key = plot.get("series")
    names = sorted({str(r[series_key]) for r in rows}) if series_key else []
    colors = {name: PALETTE[k % len(PALETTE)] for k, name in enumerate(names)}
    points = []
    for row, x, y in zip(rows, xs, ys):
        if not (math.isfinite(x) and math.isfinite(y)):
            continue
        label_parts = [str(row[k]) for k in plot.get("label", []) if k in row]
        points.append(
            {
                "x": round(px(x), 2),
                "y": round(py(y), 2),
                "color": colors.get(str(row[series_key]), PALETTE[0]) if series_key else PALETTE[0],
                "label": " / ".join(label_parts) + f": ({fmt_tick(x)}, {fmt_tick(y)})",
            }
        )

    template = temps.env.get_template("svg/scatter.svg.j2")
    return template.render(
        width=width,
        height=height,
        left=left,
        right=right,
        top=top,
        bottom=bottom,
        title=plot.get("title", ""),
        x_label=plot.get("x_label", plot["x"]),
        y_label=plot.get("y_label", plot["y"]),
        x_ticks=_ticks(x_lo, x_hi, px),
        y_ticks=_ticks(y_lo, y_hi, py),
        zero_line=round(py(0.0), 2) if y_lo < 0.0 < y_hi else None,
        legend=[{"name": name, "color": colors[name]} for name in names],
        points=points,
    )


def schema_doc(command: str, tables: Mapping[str, Sequence[str]]) -> str:
    docs = []
    for name, columns in tables.items():
        known = TABLE_DOCS.get(name, {"description": "", "columns": {}})
        docs.append(
            {
                "name": name,
                "description": known["description"],
                "columns": [{"name": c, "description": known["columns"].get(c, "")} for c in columns],
            }
        )
    return temps.env.get_template("docs/csv-schema.md.j2").render(command=command, tables=docs)


def emit_outputs(output: str, report: Mapping[str, Any]):
    """
    Writes tables/*.csv, plots/*.svg and the CSV schema document for the
    tables and plots a report declares
    """
    tables: Mapping[str, Mapping[str, Any]] = report.get("tables", {})
    layouts = {}
    for name in sorted(tables):
        table = tables[name]
        columns = list(table["columns"])
        layouts[name] = columns
        create_file(output, f"tables/{name}.csv", table_csv(table["rows"], columns))
    for name, plot in sorted(report.get("plots", {}).items()):
        create_file(output, f"plots/{name}.svg", scatter_svg(plot, tables[plot["table"]]["rows"]))
    if layouts:
        create_file(output, "tables/SCHEMA.md", schema_doc(str(report.get("command", "")), layouts))
