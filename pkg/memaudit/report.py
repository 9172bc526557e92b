"""
Report: Assembles the experiment report (markdown + summary CSV) from audit results.

Contract: cli v1.0.0
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import pandas as pd

from .analysis import seed_variation_report
from .errors import DataError

SIGNIFICANCE = 0.05
GROUP_KEYS = ["dataset", "model", "regulariser"]


@dataclass
class ReportResult:
    """Output from generate()."""
    content: str = ""
    summary: Optional[pd.DataFrame] = None
    warnings: list[str] = field(default_factory=list)
    results_hash: str = ""


def _fmt(value, digits: int = 4) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.{digits}g}"


def _results_hash(rows: list[dict]) -> str:
    items = sorted(json.dumps(r, sort_keys=True, default=str) for r in rows)
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def summarise(table: pd.DataFrame) -> pd.DataFrame:
    """
    Per (dataset, model, regulariser): canary count, memorised count and the
    average M over canaries with M > 0 (NaN when none), plus the unfiltered mean.
    """
    rows = []
    for key, group in table.groupby(GROUP_KEYS, sort=True, dropna=False):
        positive = group[group["M"] > 0]
        rows.append({
            **dict(zip(GROUP_KEYS, key)),
            "audits": len(group),
            "memorised": int((group["M"] > 0).sum()),
            "significant": int((group["p_value"] < SIGNIFICANCE).sum()),
            "avg_M_positive": float(positive["M"].mean()) if len(positive) else float("nan"),
            "avg_M_all": float(group["M"].mean()),
        })
    return pd.DataFrame(rows, columns=GROUP_KEYS + ["audits", "memorised", "significant", "avg_M_positive", "avg_M_all"])


def _canary_table(table: pd.DataFrame) -> list[str]:
    lines = [
        "| Canary | Dataset | Model | Regulariser | Seed | M | p-value | Test |",
        "|--------|---------|-------|-------------|------|---|---------|------|",
    ]
    ordered = table.sort_values(GROUP_KEYS + ["canary_id", "seed"], kind="mergesort")
    for r in ordered.itertuples(index=False):
        m = _fmt(r.M)
        if r.p_value < SIGNIFICANCE:
            m = f"**{m}**"
        lines.append(
            f"| {r.canary_id} | {r.dataset} | {r.model} | {r.regulariser} | {r.seed} | {m} | {_fmt(r.p_value, 3)} | {r.test} |"
        )
    return lines


def _summary_table(summary: pd.DataFrame) -> list[str]:
    lines = [
        "| Dataset | Model | Regulariser | Audits | M > 0 | p < 0.05 | Avg M (M > 0) | Avg M (all) |",
        "|---------|-------|-------------|--------|-------|----------|---------------|-------------|",
    ]
    for r in summary.itertuples(index=False):
        lines.append(
            f"| {r.dataset} | {r.model} | {r.regulariser} | {r.audits} | {r.memorised} | {r.significant} "
            f"| {_fmt(r.avg_M_positive)} | {_fmt(r.avg_M_all)} |"
        )
    return lines


def _regulariser_table(summary: pd.DataFrame) -> list[str]:
    regs = sorted(summary["regulariser"].unique())
    lines = [
        "| Dataset | Model | " + " | ".join(regs) + " |",
        "|---------|-------|" + "|".join("-" * (len(r) + 2) for r in regs) + "|",
    ]
    for (dataset, model), group in summary.groupby(["dataset", "model"], sort=True):
        by_reg = dict(zip(group["regulariser"], group["avg_M_positive"]))
        cells = [_fmt(by_reg.get(r)) for r in regs]
        lines.append(f"| {dataset} | {model} | " + " | ".join(cells) + " |")
    return lines


def _whitebox_table(rows: list[dict]) -> list[str]:
    lines = [
        "| Canary | Model | Seed | Label | Avg P(y\\|x_u) | Avg P(y\\|x_r) | M_w | p-value |",
        "|--------|-------|------|-------|---------------|---------------|-----|---------|",
    ]
    for r in sorted(rows, key=lambda r: (str(r.get("canary_id")), str(r.get("model")), str(r.get("seed")))):
        m_w = _fmt(r["M_w"], 3)
        p = r.get("p_value")
        if p is not None and p < SIGNIFICANCE:
            m_w = f"**{m_w}**"
        lines.append(
            f"| {r.get('canary_id')} | {r.get('model')} | {r.get('seed')} | {r['label']} "
            f"| {r['mean_p_unique']:.2f} | {r['mean_p_random']:.2f} | {m_w} | {_fmt(p, 3)} |"
        )
    return lines


def _seed_table(table: pd.DataFrame) -> tuple[list[str], int]:
    grouped: dict[str, list[float]] = {}
    for r in table.itertuples(index=False):
        key = f"{r.dataset}/{r.model}/{r.regulariser}/{r.canary_id}"
        grouped.setdefault(key, []).append(float(r.M))
    multi = {k: v for k, v in grouped.items() if len(v) >= 2}
    if not multi:
        return [], 0
    report = seed_variation_report(multi)
    lines = [
        "| Canary | Seeds | Min M | Max M | Range | + / - | Spans 0 |",
        "|--------|-------|-------|-------|-------|-------|---------|",
    ]
    for v in report:
        lines.append(
            f"| {v.canary_id} | {v.n} | {_fmt(v.min)} | {_fmt(v.max)} | {_fmt(v.range)} "
            f"| {v.positive} / {v.negative} | {'yes' if v.spans_zero else 'no'} |"
        )
    return lines, sum(v.spans_zero for v in report)


def generate(
    audits: list[dict],
    whitebox: Optional[list[dict]] = None,
    experiment: Optional[str] = None,
) -> ReportResult:
    """
    Build the experiment report.

    Args:
        audits: result rows (canary_id, dataset, model, regulariser, seed, n, M, t_stat, p_value, test)
        whitebox: M_w result dicts with canary_id/model/seed merged in
        experiment: name for the header

    Returns:
        ReportResult with markdown content and the per-group summary table
    """
    if not audits and not whitebox:
        raise DataError("experiment has no completed audits")
    result = ReportResult()
    whitebox = whitebox or []
    result.results_hash = _results_hash(audits + whitebox)

    sections = [f"# Memorisation Report: {experiment or 'experiment'}", ""]
    sections.append(
        f"> Audits: {len(audits)} | White-box: {len(whitebox)} | Hash: {result.results_hash}"
    )
    sections.append("")

    if audits:
        table = pd.DataFrame(audits)
        table["regulariser"] = table["regulariser"].fillna("none")
        summary = summarise(table)
        result.summary = summary

        sections += ["## Memorisation Scores", "", f"Bold: p < {SIGNIFICANCE}.", ""]
        sections += _canary_table(table) + [""]

        sections += ["## Averages", "", "Average M over memorised canaries (M > 0), with the unfiltered mean alongside.", ""]
        sections += _summary_table(summary) + [""]

        if summary["regulariser"].nunique() > 1:
            sections += ["## Regularisers", "", "Average M over memorised canaries, per regulariser.", ""]
            sections += _regulariser_table(summary) + [""]

        seed_lines, spanning = _seed_table(table)
        if seed_lines:
            sections += ["## Seed Variation", ""]
            sections += seed_lines + [""]
            if spanning:
                result.warnings.append(f"{spanning} canaries change sign across seeds")
        if summary["memorised"].sum() == 0:
            result.warnings.append("no canary has M > 0")

    if whitebox:
        sections += ["## White-box Scores", ""]
        sections += _whitebox_table(whitebox) + [""]

    result.content = "\n".join(sections)
    return result
