"""
Run Metrics

Counters, gauges, histograms and timers for training and evaluation
runs. Gauge series are indexed by training iteration rather than
wall-clock time, so two runs with the same seed produce the same curves.
"""

import statistics
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import psutil


@dataclass
class SeriesPoint:
    """One value of a metric series."""
    step: int
    value: float


class Counter:
    """
    A monotonically increasing count.

    Used for SGD steps, transitions and evaluated episodes.
    """

    def __init__(self, name: str, description: str = ""):
        self.name = name
        self.description = description
        self._value = 0
        self._lock = threading.Lock()

    def inc(self, amount: int = 1) -> None:
        if amount < 0:
            raise ValueError("counters only increase")
        with self._lock:
            self._value += amount

    def get(self) -> int:
        return self._value

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "type": "counter",
            "value": self._value
        }


class Gauge:
    """
    A value that moves up and down, with its per-step history.

    `record(step, value)` appends to the series; `set` keeps the last
    value without a step (host metrics).
    """

    def __init__(self, name: str, description: str = ""):
        self.name = name
        self.description = description
        self._value = 0.0
        self._lock = threading.Lock()
        self._history: List[SeriesPoint] = []

    def set(self, value: float) -> None:
        with self._lock:
            self._value = float(value)

    def record(self, step: int, value: float) -> None:
        with self._lock:
            self._value = float(value)
            self._history.append(SeriesPoint(step=int(step), value=float(value)))

    def get(self) -> float:
        return self._value

    def steps(self) -> List[int]:
        return [p.step for p in self._history]

    def values(self) -> List[float]:
        return [p.value for p in self._history]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "type": "gauge",
            "value": self._value,
            "history": [{"step": p.step, "value": p.value} for p in self._history]
        }


class Histogram:
    """
    A distribution of observed values.

    Used for TD errors during training and per-seed final accuracies
    during evaluation.
    """

    def __init__(self, name: str, description: str = "", buckets: List[float] = None):
        self.name = name
        self.description = description
        self.buckets = buckets or [0.01, 0.05, 0.1, 0.25, 0.5, 1, 2.5, 5, 10]
        self._values: List[float] = []
        self._lock = threading.Lock()

    def observe(self, value: float) -> None:
        with self._lock:
            self._values.append(float(value))

    def observe_many(self, values: Iterable[float]) -> None:
        if not isinstance(values, (np.ndarray, list, tuple)):
            values = list(values)
        with self._lock:
            self._values.extend(float(v) for v in np.ravel(values))

    def get_count(self) -> int:
        return len(self._values)

    def get_sum(self) -> float:
        return sum(self._values) if self._values else 0.0

    def get_mean(self) -> float:
        return statistics.mean(self._values) if self._values else 0.0

    def get_percentile(self, p: float) -> float:
        if not self._values:
            return 0.0
        return float(np.percentile(self._values, p))

    def get_bucket_counts(self) -> Dict[str, int]:
        values = np.asarray(self._values)
        counts = {f"le_{b}": int(np.sum(values <= b)) for b in self.buckets}
        counts["le_inf"] = len(self._values)
        return counts

    def to_dict(self) -> Dict[str, Any]:
        has_values = bool(self._values)
        return {
            "name": self.name,
            "description": self.description,
            "type": "histogram",
            "count": self.get_count(),
            "sum": self.get_sum(),
            "mean": self.get_mean() if has_values else None,
            "min": min(self._values) if has_values else None,
            "max": max(self._values) if has_values else None,
            "p50": self.get_percentile(50) if has_values else None,
            "p90": self.get_percentile(90) if has_values else None,
            "p99": self.get_percentile(99) if has_values else None,
            "buckets": self.get_bucket_counts()
        }


class Timer:
    """
    Measures phase durations; used as a context manager.
    """

    def __init__(self, name: str, description: str = ""):
        self.name = name
        self.description = description
        self._histogram = Histogram(name, description, buckets=[0.1, 1, 10, 60, 600, 3600])
        self._start_time: Optional[float] = None

    def start(self) -> None:
        self._start_time = time.perf_counter()

    def stop(self) -> float:
        if self._start_time is None:
            raise RuntimeError("Timer was not started")
        duration = time.perf_counter() - self._start_time
        self._histogram.observe(duration)
        self._start_time = None
        return duration

    @contextmanager
    def time(self):
        self.start()
        try:
            yield self
        finally:
            self.stop()

    def get_histogram(self) -> Histogram:
        return self._histogram

    def to_dict(self) -> Dict[str, Any]:
        data = self._histogram.to_dict()
        data["type"] = "timer"
        return data


class MetricsCollector:
    """
    Process-wide metric registry.

    Metrics are created on first use by name; `collect_all` gathers
    everything for the run report.
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

        self._counters: Dict[str, Counter] = {}
        self._gauges: Dict[str, Gauge] = {}
        self._histograms: Dict[str, Histogram] = {}
        self._timers: Dict[str, Timer] = {}
        self._metadata: Dict[str, Any] = {}
        self._start_time = time.time()
        self._initialized = True

    def set_metadata(self, key: str, value: Any) -> None:
        self._metadata[key] = value

    def counter(self, name: str, description: str = "") -> Counter:
        if name not in self._counters:
            self._counters[name] = Counter(name, description)
        return self._counters[name]

    def gauge(self, name: str, description: str = "") -> Gauge:
        if name not in self._gauges:
            self._gauges[name] = Gauge(name, description)
        return self._gauges[name]

    def histogram(self, name: str, description: str = "", buckets: List[float] = None) -> Histogram:
        if name not in self._histograms:
            self._histograms[name] = Histogram(name, description, buckets)
        return self._histograms[name]

    def timer(self, name: str, description: str = "") -> Timer:
        if name not in self._timers:
            self._timers[name] = Timer(name, description)
        return self._timers[name]

    def collect_all(self) -> Dict[str, Any]:
        now = time.time()
        return {
            "metadata": {
                **self._metadata,
                "collection_start": self._start_time,
                "collection_end": now,
                "duration_seconds": now - self._start_time
            },
            "counters": {name: c.to_dict() for name, c in self._counters.items()},
            "gauges": {name: g.to_dict() for name, g in self._gauges.items()},
            "histograms": {name: h.to_dict() for name, h in self._histograms.items()},
            "timers": {name: t.to_dict() for name, t in self._timers.items()}
        }

    @classmethod
    def reset_instance(cls) -> None:
        cls._instance = None


def collect_system_metrics(metrics: MetricsCollector, prefix: str = "system") -> None:
    """Record host memory and CPU gauges."""
    memory = psutil.virtual_memory()
    process = psutil.Process()
    metrics.gauge(f"{prefix}.memory.total_mb", "Total system memory").set(memory.total / 1024 / 1024)
    metrics.gauge(f"{prefix}.memory.available_mb", "Available system memory").set(memory.available / 1024 / 1024)
    metrics.gauge(f"{prefix}.process.rss_mb", "Resident memory of this process").set(
        process.memory_info().rss / 1024 / 1024
    )
    metrics.gauge(f"{prefix}.cpu.count", "Number of CPUs").set(psutil.cpu_count() or 0)
    metrics.gauge(f"{prefix}.cpu.percent", "CPU usage percentage").set(psutil.cpu_percent(interval=None))
