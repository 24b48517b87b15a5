"""
Generate Run Report

Regenerates the HTML dashboard and Markdown summary of a run from its
saved `run_data.json`, e.g. after editing the report templates.
"""

import argparse
import json
import os
import sys

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from observability.exporter import generate_html_report, generate_summary_markdown
from src.storage import atomic_write_text


def load_json_data(filepath: str) -> dict:
    with open(filepath, 'r') as f:
        return json.load(f)


def write_reports(data: dict, output_dir: str, fmt: str = "both") -> list:
    """Write report.html and/or SUMMARY.md into `output_dir`; returns the written paths."""
    written = []
    if fmt in ("html", "both"):
        written.append(atomic_write_text(os.path.join(output_dir, "report.html"), generate_html_report(data)))
    if fmt in ("markdown", "both"):
        written.append(atomic_write_text(os.path.join(output_dir, "SUMMARY.md"), generate_summary_markdown(data)))
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Regenerate run reports")
    parser.add_argument(
        "--input", "-i",
        default="runs/latest/observability/run_data.json",
        help="run_data.json of a run"
    )
    parser.add_argument(
        "--output", "-o",
        default=None,
        help="Output directory for reports (default: next to the input)"
    )
    parser.add_argument(
        "--format", "-f",
        choices=["html", "markdown", "both"],
        default="both",
        help="Output format"
    )
    args = parser.parse_args(argv)

    if not os.path.exists(args.input):
        print(f"Error: input file not found: {args.input}", file=sys.stderr)
        print("Run a command of scripts/aor.py first to produce run data.", file=sys.stderr)
        return 1

    data = load_json_data(args.input)
    output_dir = args.output or os.path.dirname(os.path.abspath(args.input))
    for path in write_reports(data, output_dir, args.format):
        print(f"Generated {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
