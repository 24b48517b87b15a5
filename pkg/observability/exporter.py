"""
Run Report Exporter

Bundles metrics, spans and log entries of one command invocation,
together with its headline results, into `run_data.json`, an HTML
dashboard and a Markdown summary.
"""

import html
import json
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from .logger import MemoryHandler, json_default
from .metrics import MetricsCollector
from .tracer import Tracer

LOG_LEVELS = ("DEBUG", "INFO", "WARN", "ERROR", "CRITICAL")


def count_log_levels(logs: List[Dict[str, Any]]) -> Dict[str, int]:
    counts = {level: 0 for level in LOG_LEVELS}
    for log in logs:
        level = log.get("level", "INFO")
        if level in counts:
            counts[level] += 1
    return counts


class RunExporter:
    """
    Writes the observability bundle of a run under `<output_dir>/observability`.

    `results` holds command-specific headline data: for training the final
    costs and the NLL trend, for evaluation the accuracy rows.
    """

    def __init__(self, output_dir: str, subdir: str = "observability"):
        self.output_dir = os.path.join(output_dir, subdir) if subdir else output_dir
        os.makedirs(self.output_dir, exist_ok=True)

        self._metrics_collector = MetricsCollector()
        self._tracer = Tracer()
        self._memory_handler: Optional[MemoryHandler] = None
        self._results: Dict[str, Any] = {}

    def set_memory_handler(self, handler: MemoryHandler) -> None:
        self._memory_handler = handler

    def add_results(self, section: str, data: Dict[str, Any]) -> None:
        self._results[section] = data

    def collect_all(self) -> Dict[str, Any]:
        data = {
            "generated_at": datetime.now().isoformat(),
            "metrics": self._metrics_collector.collect_all(),
            "traces": self._tracer.collect_traces(),
            "results": self._results,
            "logs": []
        }
        if self._memory_handler:
            data["logs"] = self._memory_handler.get_entries_as_dicts()
        return data

    def export_json(self, filename: str = "run_data.json") -> str:
        filepath = os.path.join(self.output_dir, filename)
        with open(filepath, 'w') as f:
            json.dump(self.collect_all(), f, indent=2, default=json_default)
        return filepath

    def export_html_report(self, filename: str = "report.html", data: Dict[str, Any] = None) -> str:
        filepath = os.path.join(self.output_dir, filename)
        with open(filepath, 'w') as f:
            f.write(generate_html_report(data or self.collect_all()))
        return filepath

    def export_markdown_summary(self, filename: str = "SUMMARY.md", data: Dict[str, Any] = None) -> str:
        filepath = os.path.join(self.output_dir, filename)
        with open(filepath, 'w') as f:
            f.write(generate_summary_markdown(data or self.collect_all()))
        return filepath

    def export_all(self) -> Dict[str, str]:
        data = self.collect_all()
        return {
            "json": self.export_json(),
            "html": self.export_html_report(data=data),
            "markdown": self.export_markdown_summary(data=data)
        }


def _fmt(value: Any, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def _accuracy_rows(results: Dict[str, Any]) -> List[Dict[str, Any]]:
    evaluation = results.get("evaluation", {})
    return evaluation.get("rows", [])


def generate_summary_markdown(data: Dict[str, Any]) -> str:
    """Markdown summary: overview, headline results, log level counts."""
    metrics = data.get("metrics", {})
    traces = data.get("traces", {})
    logs = data.get("logs", [])
    results = data.get("results", {})
    log_levels = count_log_levels(logs)

    counters = metrics.get("counters", {})
    timers = metrics.get("timers", {})

    lines = [
        "# Active Object Recognition Run Summary",
        "",
        f"**Generated:** {data.get('generated_at', datetime.now().isoformat())}",
        "",
        "## Overview",
        "",
        "| Item | Value |",
        "|------|-------|",
        f"| Spans | {traces.get('summary', {}).get('total_spans', 0)} |",
        f"| Failed spans | {traces.get('summary', {}).get('failed_spans', 0)} |",
        f"| Log entries | {len(logs)} |",
    ]
    for name in sorted(counters):
        lines.append(f"| {name} | {counters[name].get('value', 0)} |")
    for name in sorted(timers):
        lines.append(f"| {name} (s) | {_fmt(timers[name].get('sum'), 2)} |")

    phases = traces.get("phases", {})
    if phases:
        lines += ["", "## Phases", "", "| Phase | Spans | Failed | Total (ms) | Mean (ms) |",
                  "|-------|-------|--------|------------|-----------|"]
        for name, phase in phases.items():
            lines.append(f"| {name} | {phase['count']} | {phase['failed']} | "
                         f"{_fmt(phase['total_ms'], 1)} | {_fmt(phase['mean_ms'], 1)} |")

    training = results.get("training")
    if training:
        lines += ["", "## Training", "", "| Quantity | Value |", "|----------|-------|"]
        for key in sorted(training):
            lines.append(f"| {key} | {_fmt(training[key])} |")

    rows = _accuracy_rows(results)
    if rows:
        width = max(len(r["accuracy"]) for r in rows)
        header = "| Run | " + " | ".join(str(t) for t in range(width)) + " |"
        lines += ["", "## Accuracy vs observed frames", "", header,
                  "|" + "---|" * (width + 1)]
        for row in rows:
            cells = " | ".join(f"{100 * a:.1f}" for a in row["accuracy"])
            lines.append(f"| {row['name']} | {cells} |")

    lines += ["", "## Log levels", "", "| Level | Count |", "|-------|-------|"]
    for level in LOG_LEVELS:
        lines.append(f"| {level} | {log_levels[level]} |")

    lines.append("")
    if log_levels["ERROR"] + log_levels["CRITICAL"] == 0:
        lines.append("**Status:** completed without errors")
    else:
        lines.append(f"**Status:** {log_levels['ERROR'] + log_levels['CRITICAL']} error entries, review the logs")
    lines.append("")
    return "\n".join(lines)


def generate_html_report(data: Dict[str, Any]) -> str:
    """Self-contained HTML dashboard for one run."""
    metrics = data.get("metrics", {})
    traces = data.get("traces", {})
    logs = data.get("logs", [])
    results = data.get("results", {})
    log_levels = count_log_levels(logs)
    summary = traces.get("summary", {})

    cards = [
        ("Spans", summary.get("total_spans", 0), ""),
        ("Failed spans", summary.get("failed_spans", 0), "red" if summary.get("failed_spans") else "green"),
        ("Log entries", len(logs), ""),
        ("Errors", log_levels["ERROR"] + log_levels["CRITICAL"], "red" if log_levels["ERROR"] else "green"),
    ]
    cards_html = "\n".join(
        f'<div class="summary-card {cls}"><div class="value">{value}</div>'
        f'<div class="label">{html.escape(label)}</div></div>'
        for label, value, cls in cards
    )

    gauge_rows = []
    for name, gauge in sorted(metrics.get("gauges", {}).items()):
        history = gauge.get("history", [])
        first = history[0]["value"] if history else None
        gauge_rows.append(
            f"<tr><td>{html.escape(name)}</td><td>{len(history)}</td>"
            f"<td>{_fmt(first)}</td><td>{_fmt(gauge.get('value'))}</td></tr>"
        )

    accuracy_html = ""
    rows = _accuracy_rows(results)
    if rows:
        width = max(len(r["accuracy"]) for r in rows)
        head = "".join(f"<th>{t}</th>" for t in range(width))
        body = []
        for row in rows:
            cells = "".join(
                f"<td>{100 * a:.1f} &plusmn; {100 * s:.1f}</td>"
                for a, s in zip(row["accuracy"], row.get("stderr", [0.0] * len(row["accuracy"])))
            )
            body.append(f"<tr><td>{html.escape(row['name'])}</td>{cells}</tr>")
        accuracy_html = (
            '<div class="section"><h2>Accuracy vs observed frames (%)</h2>'
            f"<table><tr><th>Run</th>{head}</tr>{''.join(body)}</table></div>"
        )

    training_html = ""
    training = results.get("training")
    if training:
        items = "".join(
            f"<tr><td>{html.escape(k)}</td><td>{_fmt(v)}</td></tr>" for k, v in sorted(training.items())
        )
        training_html = f'<div class="section"><h2>Training</h2><table>{items}</table></div>'

    span_items = []
    for spans in traces.get("traces", {}).values():
        for span in spans:
            cls = "trace-span error" if span.get("status") == "error" else "trace-span"
            attrs = html.escape(json.dumps(span.get("attributes", {}), default=json_default))
            span_items.append(
                f'<div class="{cls}"><span class="span-name">{html.escape(span["name"])}</span>'
                f'<span class="span-duration">{_fmt(span.get("duration_ms"), 1)} ms</span>'
                f'<div class="span-attrs">{attrs}</div></div>'
            )

    log_items = []
    for log in logs[-500:]:
        level = log.get("level", "INFO")
        extra = log.get("extra")
        extra_html = f" <code>{html.escape(json.dumps(extra, default=json_default))}</code>" if extra else ""
        log_items.append(
            f'<div class="log-entry log-{level}"><span class="log-level">{level}</span>'
            f'[{html.escape(log.get("logger", ""))}] {html.escape(log.get("message", ""))}{extra_html}</div>'
        )

    return f'''<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="UTF-8">
<title>Active Object Recognition Run Report</title>
<style>
    body {{ font-family: -apple-system, 'Segoe UI', Roboto, sans-serif; background: #1a1a2e; color: #eee; }}
    .container {{ max-width: 1400px; margin: 0 auto; padding: 20px; }}
    .summary-grid {{ display: grid; grid-template-columns: repeat(auto-fit, minmax(200px, 1fr)); gap: 20px; }}
    .summary-card {{ background: #0f3460; padding: 25px; border-radius: 12px; text-align: center; }}
    .summary-card .value {{ font-size: 2.5em; font-weight: bold; color: #4da6ff; }}
    .summary-card.green .value {{ color: #4ade80; }}
    .summary-card.red .value {{ color: #f87171; }}
    .section {{ background: #16213e; border-radius: 12px; padding: 25px; margin: 25px 0; }}
    .section h2 {{ color: #4da6ff; }}
    table {{ width: 100%; border-collapse: collapse; }}
    th, td {{ padding: 8px; text-align: left; border-bottom: 1px solid #0f3460; }}
    .trace-span {{ margin: 6px 0; padding: 10px; background: #0f3460; border-left: 4px solid #4ade80; }}
    .trace-span.error {{ border-left-color: #f87171; }}
    .span-duration {{ float: right; color: #4ade80; }}
    .span-attrs {{ font-family: monospace; font-size: 0.85em; }}
    .log-entry {{ font-family: monospace; font-size: 0.85em; padding: 4px 8px; background: #0f3460; margin: 3px 0; }}
    .log-WARN {{ border-left: 4px solid #fbbf24; }}
    .log-ERROR, .log-CRITICAL {{ border-left: 4px solid #f87171; }}
    .log-level {{ font-weight: bold; margin-right: 8px; }}
</style>
</head>
<body>
<div class="container">
<h1>Active Object Recognition Run Report</h1>
<p>Generated {html.escape(str(data.get("generated_at", "")))}</p>
<div class="summary-grid">{cards_html}</div>
{training_html}
{accuracy_html}
<div class="section"><h2>Series</h2>
<table><tr><th>Gauge</th><th>Points</th><th>First</th><th>Last</th></tr>{"".join(gauge_rows)}</table></div>
<div class="section"><h2>Phases</h2>{"".join(span_items)}</div>
<div class="section"><h2>Logs</h2>{"".join(log_items)}</div>
</div>
</body>
</html>
'''
