"""Comparison tables: absolute and relative Top-1 differences against two baselines."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from pathlib import Path

from .errors import MissingBaseline

_CENT = Decimal("0.01")


def _round2(x: Fraction) -> Decimal:
    with localcontext() as ctx:
        ctx.prec = 40
        return (Decimal(x.numerator) / Decimal(x.denominator)).quantize(_CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    top1: Decimal
    delta_v: Decimal | None  # accuracy points vs the video baseline
    rel_delta_v: Decimal | None  # percent change vs the video baseline
    delta_s: Decimal | None
    rel_delta_s: Decimal | None


def relative_change(value: float, baseline: float) -> float:
    """Percent change of ``value`` with respect to ``baseline``."""
    return 100.0 * (value - baseline) / baseline


def snap_to_count(top1, eval_size: int) -> Fraction:
    """Exact accuracy ``100 k / eval_size`` whose two-decimal print is ``top1``."""
    value = Fraction(str(top1))
    k = round(value * eval_size / 100)
    exact = Fraction(100 * k, eval_size)
    if abs(exact - value) > Fraction(1, 200):
        raise ValueError(f"{top1} is not a rounded multiple of 100/{eval_size}")
    return exact


def build_comparison_table(results: dict[str, float], video_baseline: str, skeleton_baseline: str, eval_size: int | None = None) -> list[ComparisonRow]:
    """Rows sorted by Top-1 descending, then by method name.

    With ``eval_size`` the inputs are treated as rounded prints of
    ``correct / eval_size`` and the differences use the exact ratios, which is
    how relative changes of rounded accuracies should be recomputed.
    """
    for name in (video_baseline, skeleton_baseline):
        if name not in results:
            raise MissingBaseline(f"baseline {name!r} not among {sorted(results)}")
    exact = {m: snap_to_count(v, eval_size) if eval_size else Fraction(str(v)) for m, v in results.items()}
    base_v, base_s = exact[video_baseline], exact[skeleton_baseline]
    rows = []
    for method, value in exact.items():
        shown = Decimal(str(results[method])).quantize(_CENT, rounding=ROUND_HALF_UP)
        dv = dv_rel = ds = ds_rel = None
        if method != video_baseline:
            dv, dv_rel = _round2(value - base_v), _round2(100 * (value - base_v) / base_v)
        if method != skeleton_baseline:
            ds, ds_rel = _round2(value - base_s), _round2(100 * (value - base_s) / base_s)
        rows.append(ComparisonRow(method, shown, dv, dv_rel, ds, ds_rel))
    rows.sort(key=lambda r: r.method)
    rows.sort(key=lambda r: r.top1, reverse=True)
    return rows


def _signed(x: Decimal | None, suffix: str = "") -> str:
    if x is None:
        return "---"
    return f"{x:+.2f}{suffix}"


HEADER = ("method", "top1", "delta_v", "rel_delta_v", "delta_s", "rel_delta_s")


def format_table_tsv(rows: list[ComparisonRow]) -> str:
    lines = ["\t".join(HEADER)]
    for r in rows:
        lines.append(
            "\t".join(
                (r.method, f"{r.top1:.2f}", _signed(r.delta_v), _signed(r.rel_delta_v, "%"), _signed(r.delta_s), _signed(r.rel_delta_s, "%"))
            )
        )
    return "\n".join(lines) + "\n"


def read_results_csv(path) -> dict[str, float]:
    """Parse a ``method,top1`` CSV (header required)."""
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"method", "top1"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns method,top1")
        out: dict[str, float] = {}
        for row in reader:
            name = row["method"].strip()
            if name in out:
                raise ValueError(f"{path}: duplicate method {name!r}")
            out[name] = float(row["top1"])
    return out
