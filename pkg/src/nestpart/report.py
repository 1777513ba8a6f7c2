"""Markdown and CSV summaries of simulator traces, partition stats and strategy runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import ReportError

TRACE_COLUMNS = ("step", "node", "host_busy_s", "dev_busy_s", "sync_wait_s", "hd_bytes", "net_bytes")
STATS_COLUMNS = ("node", "K", "K_dev", "surface_faces", "transfer_dof")
STRATEGY_COLUMNS = ("strategy", "step_time_s", "wall_time_s", "hd_bytes_per_step", "net_bytes_per_step", "speedup")

_INT = {"step", "node", "hd_bytes", "net_bytes", "K", "K_dev", "surface_faces", "transfer_dof",
        "hd_bytes_per_step", "net_bytes_per_step"}


def _read(path, columns, required=True):
    """Rows of a CSV with exactly ``columns``; errors carry the line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError(f"{path}:1: empty file, expected header {','.join(columns)}") from None
    if tuple(h.strip() for h in header) != columns:
        raise ReportError(f"{path}:1: expected header {','.join(columns)}, got {','.join(header)}")
    rows = []
    for line, raw in enumerate(reader, start=2):
        if not raw:
            continue
        if len(raw) != len(columns):
            raise ReportError(f"{path}:{line}: expected {len(columns)} fields, got {len(raw)}")
        row = {}
        for col, val in zip(columns, raw):
            val = val.strip()
            if col == "strategy":
                if not val:
                    raise ReportError(f"{path}:{line}: empty strategy name")
                row[col] = val
                continue
            try:
                row[col] = int(val) if col in _INT else float(val)
            except ValueError:
                raise ReportError(f"{path}:{line}: column {col!r}: cannot parse {val!r}") from None
            if col != "speedup" and row[col] < 0:
                raise ReportError(f"{path}:{line}: column {col!r} is negative")
        rows.append(row)
    if required and not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def read_trace(path):
    try:
        return _read(path, TRACE_COLUMNS)
    except ReportError as exc:
        if str(exc).endswith("no data rows"):
            raise ReportError(f"{path}: trace is empty, nothing to report") from None
        raise


def read_stats(path):
    return _read(path, STATS_COLUMNS)


def read_strategies(path):
    rows = _read(path, STRATEGY_COLUMNS)
    if not any(r["strategy"] == "offload_none" for r in rows):
        raise ReportError(f"{path}: no offload_none baseline row")
    return rows


@dataclass
class Report:
    markdown: str
    csvs: dict  # file name -> text

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(self.markdown)
        for name, text in self.csvs.items():
            (out / name).write_text(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def node_summary(trace_rows):
    nodes = {}
    for r in trace_rows:
        s = nodes.setdefault(r["node"], dict(steps=0, host=0.0, dev=0.0, wait=0.0, span=0.0, hd=0, net=0))
        s["steps"] += 1
        s["host"] += r["host_busy_s"]
        s["dev"] += r["dev_busy_s"]
        s["wait"] += r["sync_wait_s"]
        s["span"] += 2 * max(r["host_busy_s"], r["dev_busy_s"])
        s["hd"] += r["hd_bytes"]
        s["net"] += r["net_bytes"]
    out = []
    for n in sorted(nodes):
        s = nodes[n]
        idle = s["wait"] / s["span"] if s["span"] > 0 else 0.0
        out.append((n, s["steps"], s["host"], s["dev"], s["wait"], idle, s["hd"], s["net"]))
    return out


def build_report(trace_rows, stats_rows=None, strategy_rows=None) -> Report:
    if not trace_rows:
        raise ReportError("trace is empty, nothing to report")
    nodes = node_summary(trace_rows)
    steps = len({r["step"] for r in trace_rows})
    total_wait = sum(n[4] for n in nodes)
    total_span = sum(2 * max(r["host_busy_s"], r["dev_busy_s"]) for r in trace_rows)
    overall_idle = total_wait / total_span if total_span > 0 else 0.0

    md = ["# Heterogeneous run report", ""]
    md += [f"- steps: {steps}", f"- nodes: {len(nodes)}", f"- overall idle fraction: {overall_idle:.6f}", ""]
    md += ["## Idle fractions by node", ""]
    node_rows = [
        (n, st, f"{h:.6e}", f"{d:.6e}", f"{w:.6e}", f"{idle:.6f}", hd, net)
        for n, st, h, d, w, idle, hd, net in nodes
    ]
    node_header = ("node", "steps", "host_busy_s", "dev_busy_s", "sync_wait_s", "idle_fraction", "hd_bytes", "net_bytes")
    md += [_table(node_header, node_rows), ""]
    csvs = {"node_summary.csv": _csv_text(node_header, node_rows)}

    if strategy_rows:
        base = next(r for r in strategy_rows if r["strategy"] == "offload_none")["wall_time_s"]
        rows = []
        for r in strategy_rows:
            speedup = base / r["wall_time_s"] if r["wall_time_s"] > 0 else float("inf")
            rows.append(
                (r["strategy"], f"{r['wall_time_s']:.6e}", f"{speedup:.4f}", r["hd_bytes_per_step"], r["net_bytes_per_step"])
            )
        header = ("strategy", "wall_time_s", "speedup_vs_offload_none", "hd_bytes_per_step", "net_bytes_per_step")
        md += ["## Strategies", "", _table(header, rows), ""]
        csvs["strategy_summary.csv"] = _csv_text(header, rows)

    if stats_rows:
        rows = []
        for r in stats_rows:
            ratio = r["K_dev"] / (r["K"] - r["K_dev"]) if r["K"] > r["K_dev"] else float("inf")
            rows.append((r["node"], r["K"], r["K_dev"], r["K"] - r["K_dev"], f"{ratio:.4f}", r["surface_faces"], r["transfer_dof"]))
        header = ("node", "K", "K_dev", "K_host", "dev_host_ratio", "surface_faces", "transfer_dof")
        md += ["## Partition", "", _table(header, rows), ""]
        csvs["partition_summary.csv"] = _csv_text(header, rows)

    return Report("\n".join(md), csvs)


def report_files(trace, stats=None, strategies=None) -> Report:
    """Validate every input file, then build the report."""
    trace_rows = read_trace(trace)
    stats_rows = read_stats(stats) if stats else None
    strategy_rows = read_strategies(strategies) if strategies else None
    return build_report(trace_rows, stats_rows, strategy_rows)
