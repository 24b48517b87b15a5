"""
Phase Tracing

Spans for the phases of a command: data generation, training,
evaluation per run and seed, policy export. Spans nest through a
thread-local stack; worker threads attach to a parent passed in
explicitly. Finished spans are rolled up per phase name for the run
report.
"""

import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional


class SpanStatus(Enum):
    UNSET = "unset"
    OK = "ok"
    ERROR = "error"


@dataclass
class SpanContext:
    """Identifies a span within its trace."""
    trace_id: str
    span_id: str
    parent_span_id: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {"trace_id": self.trace_id, "span_id": self.span_id}
        if self.parent_span_id:
            data["parent_span_id"] = self.parent_span_id
        return data


@dataclass
class Span:
    """One phase of work, tagged with seed, variant, iterations and so on."""

    name: str
    context: SpanContext
    attributes: Dict[str, Any] = field(default_factory=dict)
    start_time: float = field(default_factory=time.time)
    end_time: Optional[float] = None
    status: SpanStatus = SpanStatus.UNSET
    status_message: Optional[str] = None

    def set_attribute(self, key: str, value: Any) -> 'Span':
        self.attributes[key] = value
        return self

    def fail(self, error: BaseException) -> None:
        self.status = SpanStatus.ERROR
        self.status_message = str(error)
        self.attributes["error.type"] = type(error).__name__

    @property
    def duration_ms(self) -> Optional[float]:
        if self.end_time is None:
            return None
        return (self.end_time - self.start_time) * 1000

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "name": self.name,
            "context": self.context.to_dict(),
            "start_time": self.start_time,
            "status": self.status.value,
            "attributes": self.attributes
        }
        if self.end_time is not None:
            data["end_time"] = self.end_time
            data["duration_ms"] = self.duration_ms
        if self.status_message:
            data["status_message"] = self.status_message
        return data


class _SpanStack:
    """Open spans of the current thread."""

    _local = threading.local()

    @classmethod
    def _stack(cls) -> List[Span]:
        if not hasattr(cls._local, "spans"):
            cls._local.spans = []
        return cls._local.spans

    @classmethod
    def top(cls) -> Optional[Span]:
        stack = cls._stack()
        return stack[-1] if stack else None

    @classmethod
    def push(cls, span: Span) -> None:
        cls._stack().append(span)

    @classmethod
    def pop(cls, span: Span) -> None:
        stack = cls._stack()
        if stack and stack[-1] is span:
            stack.pop()

    @classmethod
    def clear(cls) -> None:
        cls._local.spans = []


class Tracer:
    """
    Process-wide tracer.

    A span opened on a worker thread starts a new trace unless `parent`
    is given; evaluation passes the enclosing run span so per-seed
    spans stay in one tree.
    """

    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = super().__new__(cls)
                    cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return
        self.service_name = "aor"
        self._metadata: Dict[str, Any] = {}
        self._traces: Dict[str, List[Span]] = {}
        self._finished: List[Span] = []
        self._spans_lock = threading.Lock()
        self._initialized = True

    def configure(self, service_name: str, **metadata) -> None:
        self.service_name = service_name
        self._metadata = metadata

    def current_span(self) -> Optional[Span]:
        return _SpanStack.top()

    def _open(self, name: str, attributes: Optional[Dict[str, Any]], parent: Optional[Span]) -> Span:
        parent = parent or _SpanStack.top()
        span_id = uuid.uuid4().hex[:16]
        if parent is None:
            context = SpanContext(uuid.uuid4().hex[:16], span_id)
        else:
            context = SpanContext(parent.context.trace_id, span_id, parent.context.span_id)
        span = Span(name, context, dict(attributes or {}))
        with self._spans_lock:
            self._traces.setdefault(context.trace_id, []).append(span)
        _SpanStack.push(span)
        return span

    def _close(self, span: Span) -> None:
        span.end_time = time.time()
        if span.status == SpanStatus.UNSET:
            span.status = SpanStatus.OK
        _SpanStack.pop(span)
        with self._spans_lock:
            self._finished.append(span)

    @contextmanager
    def span(self, name: str, attributes: Optional[Dict[str, Any]] = None, parent: Optional[Span] = None):
        """Open a span for the duration of the block; an exception marks it failed and propagates."""
        span = self._open(name, attributes, parent)
        try:
            yield span
        except BaseException as e:
            span.fail(e)
            raise
        finally:
            self._close(span)

    def phase_summary(self) -> Dict[str, Dict[str, Any]]:
        """Finished spans grouped by name: count, failures, total and mean duration."""
        phases: Dict[str, Dict[str, Any]] = {}
        with self._spans_lock:
            finished = list(self._finished)
        for span in finished:
            entry = phases.setdefault(span.name, {"count": 0, "failed": 0, "total_ms": 0.0})
            entry["count"] += 1
            entry["failed"] += span.status == SpanStatus.ERROR
            entry["total_ms"] += span.duration_ms
        for entry in phases.values():
            entry["mean_ms"] = entry["total_ms"] / entry["count"]
        return dict(sorted(phases.items()))

    def collect_traces(self) -> Dict[str, Any]:
        with self._spans_lock:
            traces = {trace_id: [s.to_dict() for s in spans] for trace_id, spans in self._traces.items()}
            finished = len(self._finished)
            failed = sum(1 for s in self._finished if s.status == SpanStatus.ERROR)
        return {
            "metadata": {"service_name": self.service_name, **self._metadata},
            "traces": traces,
            "phases": self.phase_summary(),
            "summary": {
                "total_traces": len(traces),
                "total_spans": sum(len(s) for s in traces.values()),
                "completed_spans": finished,
                "failed_spans": failed
            }
        }

    @classmethod
    def reset_instance(cls) -> None:
        _SpanStack.clear()
        cls._instance = None
