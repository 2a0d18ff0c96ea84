#!/usr/bin/env python3
"""
Logging setup shared by the command line and the simulation loop.

Records go to stderr and into an in-memory ring buffer, so a run can dump
its recent diagnostics next to its output files.
"""
import logging
import sys
import threading
from collections import deque
from datetime import datetime

LOG_FORMAT = '[%(asctime)s] %(levelname)s: %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
DEFAULT_CAPACITY = 1000


class LogBuffer:
    """Thread-safe ring of the most recent formatted records."""

    def __init__(self, max_size=DEFAULT_CAPACITY):
        self.max_size = max_size
        self._entries = deque(maxlen=max_size)
        self._lock = threading.Lock()

    def add_log(self, level, message, timestamp=None):
        entry = {'timestamp': timestamp or datetime.now().isoformat(), 'level': level, 'message': message}
        with self._lock:
            self._entries.append(entry)

    def get_logs(self, limit=100):
        """Most recent entries, oldest first; a falsy limit returns all of them."""
        with self._lock:
            entries = list(self._entries)
        return entries[-limit:] if limit else entries

    def clear(self):
        with self._lock:
            self._entries.clear()

    def dump(self, path):
        """Write the buffered messages to ``path``, one per line; returns how many."""
        lines = [entry['message'] for entry in self.get_logs(limit=None)]
        with open(path, 'w') as f:
            f.writelines(line + '\n' for line in lines)
        return len(lines)


# shared by every run in the process; the CLI clears it when a run starts
log_buffer = LogBuffer()


class LogBufferHandler(logging.Handler):
    """Mirrors formatted records into a LogBuffer."""

    def __init__(self, buffer=None):
        super().__init__()
        self.buffer = buffer if buffer is not None else log_buffer

    def emit(self, record):
        try:
            created = datetime.fromtimestamp(record.created).isoformat()
            self.buffer.add_log(record.levelname, self.format(record), created)
        except Exception:
            self.handleError(record)


def configure_logging(level=logging.INFO, buffer=None):
    """Send logs to stderr and the ring buffer; safe to call more than once."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    stream_handler = logging.StreamHandler(sys.stderr)
    buffer_handler = LogBufferHandler(buffer)
    for handler in (stream_handler, buffer_handler):
        handler.setFormatter(formatter)
    # force replaces handlers left by an earlier call
    logging.basicConfig(level=level, handlers=[stream_handler, buffer_handler], force=True)
    return buffer_handler.buffer
