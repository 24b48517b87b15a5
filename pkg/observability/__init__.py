"""
Run Observability

Structured logging, iteration-indexed metrics, phase tracing and
report export for training and evaluation runs.
"""

from .metrics import MetricsCollector, Counter, Gauge, Histogram, Timer, collect_system_metrics
from .logger import (
    ObservabilityLogger, LogLevel, MemoryHandler, ConsoleHandler, FileHandler, JsonHandler,
    LogContext, configure_logging, get_logger, run_scope
)
from .tracer import Tracer, Span, SpanContext, SpanStatus
from .exporter import RunExporter

__all__ = [
    "MetricsCollector",
    "Counter",
    "Gauge",
    "Histogram",
    "Timer",
    "collect_system_metrics",
    "ObservabilityLogger",
    "LogLevel",
    "MemoryHandler",
    "ConsoleHandler",
    "FileHandler",
    "JsonHandler",
    "LogContext",
    "configure_logging",
    "get_logger",
    "run_scope",
    "Tracer",
    "Span",
    "SpanContext",
    "SpanStatus",
    "RunExporter"
]

__version__ = "1.0.0"
