"""Process-wide warning counters.

Non-fatal numerical events (clamped logs, empty loss masks, sampler
fallbacks, ...) are counted here instead of raised, so long runs keep going
while tests and run reports can still inspect what happened.
"""
import logging
from collections import Counter

logger = logging.getLogger("pgl")

counters: Counter = Counter()


def warn(key, message=None, count=1):
    counters[key] += count
    if message:
        logger.debug("%s: %s", key, message)


def reset():
    counters.clear()


def snapshot():
    return dict(sorted(counters.items()))
