"""Aggregate trial CSVs into per-setting mean/std tables and two-column .dat files."""

from __future__ import annotations

import csv
import io
import re
import statistics
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

from qlens.errors import InputError
from qlens.harness.runner import CSV_FIELDS, fmt
from qlens.tensor import atomic_write_bytes

GROUP_KEYS = ("preset", "site_scope", "kind", "bits_w", "bits_a", "transform", "metric")
SUMMARY_FIELDS = GROUP_KEYS + ("n", "mean", "std", "mean_delta", "std_delta", "summary")
_ALPHA = re.compile(r"^alpha=([0-9.eE+-]+)x$")


def read_rows(paths: Iterable) -> list[dict[str, str]]:
    rows = []
    for path in paths:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise InputError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows.extend(reader)
    return rows


def _std(xs: Sequence[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def aggregate(rows: list[dict[str, str]]) -> list[dict[str, str]]:
    """Group by setting (first-appearance order); sample std, 0 for a single row."""
    groups: "OrderedDict[tuple, list[dict]]" = OrderedDict()
    for r in rows:
        groups.setdefault(tuple(r[k] for k in GROUP_KEYS), []).append(r)
    out = []
    for key, members in groups.items():
        vals = [float(m["value"]) for m in members]
        deltas = [float(m["delta"]) for m in members]
        mean, std = statistics.fmean(vals), _std(vals)
        rec = dict(zip(GROUP_KEYS, key))
        rec.update(
            n=str(len(vals)),
            mean=fmt(mean),
            std=fmt(std),
            mean_delta=fmt(statistics.fmean(deltas)),
            std_delta=fmt(_std(deltas)),
            summary=f"{mean:.4g}±{std:.2g}",
        )
        out.append(rec)
    return out


def _label(rec: dict) -> str:
    parts = [rec["kind"], rec["site_scope"]]
    if rec["bits_w"] or rec["bits_a"]:
        parts.append(f"w{rec['bits_w'] or '-'}a{rec['bits_a'] or '-'}")
    parts.append(rec["transform"])
    return "/".join(parts)


def dat_files(summary: list[dict[str, str]]) -> dict[str, str]:
    """One file per (preset, metric): ``x mean`` lines, x = alpha multiple or setting index."""
    files: "OrderedDict[str, list[str]]" = OrderedDict()
    for rec in summary:
        name = re.sub(r"[^A-Za-z0-9_.-]+", "_", f"{rec['preset']}_{rec['metric']}") + ".dat"
        lines = files.setdefault(name, [])
        m = _ALPHA.match(rec["kind"])
        x = m.group(1) if m else str(sum(1 for ln in lines if not ln.startswith("#")))
        lines.append(f"# {x}: {_label(rec)}")
        lines.append(f"{x} {rec['mean']}")
    # comments first, data after, so plotting tools read a clean two-column block
    return {
        name: "\n".join([ln for ln in lines if ln.startswith("#")] + [ln for ln in lines if not ln.startswith("#")]) + "\n"
        for name, lines in files.items()
    }


def write_report(paths: Iterable, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(read_rows(paths))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\r\n")
    w.writeheader()
    w.writerows(summary)
    written = [out / "summary.csv"]
    atomic_write_bytes(written[0], buf.getvalue().encode())
    for name, text in dat_files(summary).items():
        atomic_write_bytes(out / name, text.encode())
        written.append(out / name)
    return written


def format_table(summary: list[dict[str, str]]) -> str:
    cols = ("kind", "site_scope", "bits_w", "bits_a", "transform", "metric", "n", "summary")
    widths = {c: max(len(c), *(len(r[c]) for r in summary)) if summary else len(c) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(r[c].ljust(widths[c]) for c in cols) for r in summary]
    return "\n".join(lines)
