"""
Process-wide diagnostic counters
"""
import logging
import threading
from collections import Counter
from typing import Dict

logger = logging.getLogger(__name__)


class Diagnostics:
    """Named counters for recoverable anomalies (zero-norm features, skipped tags, ...)"""

    def __init__(self):
        self._counts: Counter = Counter()
        self._lock = threading.Lock()

    def increment(self, name: str, amount: int = 1, **context) -> None:
        if amount <= 0:
            return
        with self._lock:
            self._counts[name] += amount
        detail = ", ".join(f"{k}={v}" for k, v in sorted(context.items()))
        logger.warning(f"{name} (+{amount}){': ' + detail if detail else ''}")

    def get(self, name: str) -> int:
        with self._lock:
            return self._counts[name]

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(sorted(self._counts.items()))

    def reset(self) -> None:
        with self._lock:
            self._counts.clear()


diagnostics = Diagnostics()
