"""
Structured Run Logging

Structured logging for training and evaluation runs: JSON lines,
run-scoped context (run id, command, seed) and level filtering.
"""

import inspect
import json
import os
import sys
import threading
import time
import traceback
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from enum import IntEnum
from typing import Any, Dict, List, Optional, TextIO, Tuple

import numpy as np


class LogLevel(IntEnum):
    """Log levels with numeric values for filtering."""
    DEBUG = 10
    INFO = 20
    WARN = 30
    ERROR = 40
    CRITICAL = 50


def json_default(value: Any) -> Any:
    """Fallback encoder for numpy values found in log extras and reports."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    return str(value)


@dataclass
class LogEntry:
    """A single log entry with its run context."""
    timestamp: float
    level: str
    message: str
    logger_name: str
    run_id: Optional[str] = None
    command: Optional[str] = None
    seed: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)
    source_file: Optional[str] = None
    source_line: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary, excluding unset context fields."""
        data = {
            "timestamp": self.timestamp,
            "datetime": datetime.fromtimestamp(self.timestamp).isoformat(),
            "level": self.level,
            "message": self.message,
            "logger": self.logger_name
        }

        if self.run_id:
            data["run_id"] = self.run_id
        if self.command:
            data["command"] = self.command
        if self.seed is not None:
            data["seed"] = self.seed
        if self.extra:
            data["extra"] = self.extra
        if self.source_file:
            data["source"] = {
                "file": self.source_file,
                "line": self.source_line
            }

        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=json_default)


class LogContext:
    """
    Thread-local run context attached to every log entry.

    Holds `run_id`, `command` and `seed` plus free-form extras such as
    the variant being trained.
    """

    _local = threading.local()

    @classmethod
    def current(cls) -> Dict[str, Any]:
        if not hasattr(cls._local, "context"):
            cls._local.context = {"extra": {}}
        return cls._local.context

    @classmethod
    def clear(cls) -> None:
        cls._local.context = {"extra": {}}

    @classmethod
    @contextmanager
    def scope(cls, run_id: str = None, command: str = None, seed: int = None, **extra):
        """Scope the run context; the previous context is restored on exit."""
        previous = cls.current()
        context = {**previous, "extra": {**previous["extra"], **extra}}
        for key, value in (("run_id", run_id), ("command", command), ("seed", seed)):
            if value is not None:
                context[key] = value
        cls._local.context = context
        try:
            yield
        finally:
            cls._local.context = previous


class LogHandler:
    """Base class for log handlers."""

    def __init__(self, level: LogLevel = LogLevel.DEBUG):
        self.level = level

    def should_log(self, level: LogLevel) -> bool:
        return level >= self.level

    def emit(self, entry: LogEntry) -> None:
        raise NotImplementedError


class ConsoleHandler(LogHandler):
    """Human-readable console output, colored when attached to a TTY."""

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARN": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
    }
    RESET = "\033[0m"

    def __init__(self, level: LogLevel = LogLevel.INFO,
                 stream: TextIO = None, use_colors: bool = True):
        super().__init__(level)
        self.stream = stream or sys.stderr
        self.use_colors = use_colors and hasattr(self.stream, 'isatty') and self.stream.isatty()

    def emit(self, entry: LogEntry) -> None:
        if not self.should_log(LogLevel[entry.level]):
            return

        timestamp = datetime.fromtimestamp(entry.timestamp).strftime("%H:%M:%S.%f")[:-3]

        if self.use_colors:
            color = self.COLORS.get(entry.level, "")
            level_str = f"{color}{entry.level:8}{self.RESET}"
        else:
            level_str = f"{entry.level:8}"

        parts = [f"[{timestamp}]", level_str, f"[{entry.logger_name}]"]
        if entry.command:
            parts.append(f"[{entry.command}]")
        parts.append(entry.message)
        if entry.extra:
            parts.append(f"| {json.dumps(entry.extra, default=json_default)}")

        print(" ".join(parts), file=self.stream)


class JsonHandler(LogHandler):
    """Writes JSON-formatted entries to a stream."""

    def __init__(self, level: LogLevel = LogLevel.DEBUG, stream: TextIO = None):
        super().__init__(level)
        self.stream = stream or sys.stdout

    def emit(self, entry: LogEntry) -> None:
        if not self.should_log(LogLevel[entry.level]):
            return
        print(entry.to_json(), file=self.stream)


class FileHandler(LogHandler):
    """Appends JSON lines to a file."""

    def __init__(self, filepath: str, level: LogLevel = LogLevel.DEBUG):
        super().__init__(level)
        self.filepath = filepath
        self._lock = threading.Lock()
        os.makedirs(os.path.dirname(filepath) or '.', exist_ok=True)

    def emit(self, entry: LogEntry) -> None:
        if not self.should_log(LogLevel[entry.level]):
            return
        with self._lock:
            with open(self.filepath, 'a') as f:
                f.write(entry.to_json() + "\n")


class MemoryHandler(LogHandler):
    """Keeps entries in memory for the run report."""

    def __init__(self, level: LogLevel = LogLevel.DEBUG, max_entries: int = 10000):
        super().__init__(level)
        self.max_entries = max_entries
        self._entries: List[LogEntry] = []
        self._lock = threading.Lock()

    def emit(self, entry: LogEntry) -> None:
        if not self.should_log(LogLevel[entry.level]):
            return
        with self._lock:
            self._entries.append(entry)
            if len(self._entries) > self.max_entries:
                self._entries = self._entries[-self.max_entries:]

    def get_entries(self) -> List[LogEntry]:
        return self._entries.copy()

    def get_entries_as_dicts(self) -> List[Dict[str, Any]]:
        return [e.to_dict() for e in self._entries]

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


class ObservabilityLogger:
    """
    Named structured logger.

    Entries go to the logger's own handlers plus the global handlers
    installed by the command line. With no handler installed, entries at
    WARN and above fall through to stderr.
    """

    _loggers: Dict[str, 'ObservabilityLogger'] = {}
    _global_handlers: List[LogHandler] = []
    _fallback: Optional[LogHandler] = None
    _lock = threading.Lock()

    def __init__(self, name: str):
        self.name = name
        self._handlers: List[LogHandler] = []

    @classmethod
    def get_logger(cls, name: str = "aor") -> 'ObservabilityLogger':
        with cls._lock:
            return cls._loggers.setdefault(name, cls(name))

    @classmethod
    def add_global_handler(cls, handler: LogHandler) -> None:
        cls._global_handlers.append(handler)

    @classmethod
    def reset(cls) -> None:
        """Drop all loggers and handlers."""
        cls._loggers.clear()
        cls._global_handlers.clear()

    def add_handler(self, handler: LogHandler) -> None:
        self._handlers.append(handler)

    @staticmethod
    def _caller() -> Tuple[Optional[str], Optional[int]]:
        # _caller -> _log -> debug/info/... -> caller
        frame = inspect.currentframe()
        try:
            caller = frame.f_back.f_back.f_back if frame else None
            if caller is None:
                return None, None
            return os.path.basename(caller.f_code.co_filename), caller.f_lineno
        finally:
            del frame

    def _log(self, level: LogLevel, message: str, **extra) -> None:
        context = LogContext.current()
        source_file, source_line = self._caller()
        entry = LogEntry(
            timestamp=time.time(),
            level=level.name,
            message=message,
            logger_name=self.name,
            run_id=context.get("run_id"),
            command=context.get("command"),
            seed=context.get("seed"),
            extra={**context["extra"], **extra},
            source_file=source_file,
            source_line=source_line
        )

        handlers = self._handlers + self._global_handlers
        if not handlers:
            if ObservabilityLogger._fallback is None:
                ObservabilityLogger._fallback = ConsoleHandler(level=LogLevel.WARN)
            handlers = [ObservabilityLogger._fallback]

        for handler in handlers:
            try:
                handler.emit(entry)
            except Exception as e:
                sys.stderr.write(f"Error in log handler: {e}\n")

    def debug(self, message: str, **extra) -> None:
        self._log(LogLevel.DEBUG, message, **extra)

    def info(self, message: str, **extra) -> None:
        self._log(LogLevel.INFO, message, **extra)

    def warn(self, message: str, **extra) -> None:
        self._log(LogLevel.WARN, message, **extra)

    def error(self, message: str, **extra) -> None:
        self._log(LogLevel.ERROR, message, **extra)

    def critical(self, message: str, **extra) -> None:
        self._log(LogLevel.CRITICAL, message, **extra)

    def exception(self, message: str, exc_info: BaseException = None, **extra) -> None:
        """ERROR entry carrying the exception and its traceback."""
        if exc_info is not None:
            extra['exception'] = f"{type(exc_info).__name__}: {exc_info}"
            extra['traceback'] = "".join(
                traceback.format_exception(type(exc_info), exc_info, exc_info.__traceback__)
            )
        self._log(LogLevel.ERROR, message, **extra)


def get_logger(name: str = "aor") -> ObservabilityLogger:
    return ObservabilityLogger.get_logger(name)


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


@contextmanager
def run_scope(command: str, seed: Optional[int] = None, run_id: str = None, **extra):
    """Scope the log context to one command invocation; yields the run id."""
    rid = run_id or new_run_id()
    with LogContext.scope(run_id=rid, command=command, seed=seed, **extra):
        yield rid


def configure_logging(output_dir: Optional[str] = None,
                      console_level: LogLevel = LogLevel.INFO,
                      json_stdout: bool = False) -> MemoryHandler:
    """
    Install the global handlers for one command invocation.

    Returns the memory handler whose entries end up in the run report.
    """
    ObservabilityLogger.reset()

    memory_handler = MemoryHandler(level=LogLevel.DEBUG)
    ObservabilityLogger.add_global_handler(memory_handler)
    ObservabilityLogger.add_global_handler(ConsoleHandler(level=console_level))

    if json_stdout:
        ObservabilityLogger.add_global_handler(JsonHandler(level=console_level))
    if output_dir:
        log_path = os.path.join(output_dir, "observability", "run.log.jsonl")
        ObservabilityLogger.add_global_handler(FileHandler(log_path, level=LogLevel.DEBUG))

    return memory_handler
