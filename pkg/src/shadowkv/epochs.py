"""Epoch protection and asynchronous cuts.

A process-wide monotone epoch counter plus a fixed table of per-thread slots.
A registered thread that is "protected" has published the epoch it observed;
the minimum over protected slots bounds which deferred actions may run. An
action registered by ``bump_with_action`` at epoch e runs exactly once, on
whichever thread later notices that every slot has moved past e (or is
unprotected). There is no dedicated drain thread.

Synchronization note: slot writes are single-writer (the owning thread) and
plain list item stores, which are atomic in CPython. The counter and the
drain list are guarded by one short lock; actions always execute outside it.
"""

from __future__ import annotations

import threading
from collections import deque
from typing import Callable, Optional

from .errors import ResourceExhausted, UsageError

UNPROTECTED = -1

# An action may protect/refresh/bump, which re-enters drain; beyond this
# depth further draining is deferred to the next refresh instead.
MAX_DRAIN_DEPTH = 4

# Overflow handling for a full drain list spins this many drain attempts
# before giving up; hitting the limit means some thread is parked protected
# while others keep bumping, which is an application bug.
DRAIN_SPIN_LIMIT = 1 << 20


class EpochManager:
    """Global epoch counter, thread slots, and the deferred-action list."""

    def __init__(self, max_threads: int = 128, drain_capacity: int = 256):
        if max_threads < 1:
            raise UsageError("max_threads must be >= 1")
        self.max_threads = max_threads
        self.drain_capacity = drain_capacity
        self.current_epoch = 1
        self._slots: list[int] = [UNPROTECTED] * max_threads
        self._registered: list[bool] = [False] * max_threads
        self._active_ids: list[int] = []  # registered ids, for bounded scans
        self._drain: deque[tuple[int, Callable[[], None]]] = deque()
        self._lock = threading.Lock()
        self._depth = threading.local()
        self._tls = threading.local()  # this thread's registered id, if any
        self.actions_run = 0  # instrumentation, monotone

    # -- registration ------------------------------------------------------

    def register_thread(self) -> int:
        with self._lock:
            for tid in range(self.max_threads):
                if not self._registered[tid]:
                    self._registered[tid] = True
                    self._slots[tid] = UNPROTECTED
                    self._active_ids = [
                        i for i in range(self.max_threads) if self._registered[i]
                    ]
                    self._tls.tid = tid
                    return tid
        raise ResourceExhausted("thread table full")

    def unregister_thread(self, thread_id: int) -> None:
        self._check_registered(thread_id)
        with self._lock:
            self._registered[thread_id] = False
            self._slots[thread_id] = UNPROTECTED
            self._active_ids = [
                i for i in range(self.max_threads) if self._registered[i]
            ]
        if getattr(self._tls, "tid", None) == thread_id:
            self._tls.tid = None
        self.drain()

    def _check_registered(self, thread_id: int) -> None:
        if (
            not 0 <= thread_id < self.max_threads
            or not self._registered[thread_id]
        ):
            raise UsageError(f"thread id {thread_id} not registered")

    # -- protection --------------------------------------------------------

    def protect(self, thread_id: int) -> int:
        """Publish the current epoch in this thread's slot and return it."""
        self._check_registered(thread_id)
        observed = self.current_epoch
        self._slots[thread_id] = observed
        self.drain()
        return observed

    def refresh(self, thread_id: int) -> int:
        """Re-publish; identical slot write, callers use it on loop boundaries."""
        return self.protect(thread_id)

    def unprotect(self, thread_id: int) -> None:
        self._check_registered(thread_id)
        self._slots[thread_id] = UNPROTECTED
        self.drain()

    def is_protected(self, thread_id: int) -> bool:
        return self._slots[thread_id] != UNPROTECTED

    # -- cuts ---------------------------------------------------------------

    def bump_with_action(self, action: Optional[Callable[[], None]] = None) -> int:
        """Advance the epoch; run ``action`` once the old epoch is safe.

        Returns the new current epoch. With ``action=None`` this is a bare
        cut (used when only the counter advance matters).
        """
        spins = 0
        while True:
            with self._lock:
                if action is None or len(self._drain) < self.drain_capacity:
                    old = self.current_epoch
                    self.current_epoch = old + 1
                    if action is not None:
                        self._drain.append((old, action))
                    break
            # Full list: help drain instead of dropping or growing. A bump
            # is a quiescent point for the caller, so advancing its own slot
            # here is legal and keeps it from being the laggard that blocks
            # every drain.
            tid = getattr(self._tls, "tid", None)
            if tid is not None and self._slots[tid] != UNPROTECTED:
                self._slots[tid] = self.current_epoch
            self.drain()
            spins += 1
            if spins > DRAIN_SPIN_LIMIT:
                raise ResourceExhausted("drain list full and nothing drainable")
        self.drain()
        return old + 1

    # -- draining ------------------------------------------------------------

    def safe_epoch(self) -> int:
        """Largest epoch e such that actions registered at e may run."""
        low = None
        for tid in self._active_ids:
            s = self._slots[tid]
            if s != UNPROTECTED and (low is None or s < low):
                low = s
        if low is None:
            return self.current_epoch - 1
        return low - 1

    def drain(self) -> int:
        """Run every drainable action; returns how many ran.

        Actions execute outside the lock in registration-epoch order.
        Exactly-once holds because entries are popped under the lock before
        execution; concurrent drainers pop disjoint entries.
        """
        depth = getattr(self._depth, "v", 0)
        if depth >= MAX_DRAIN_DEPTH:
            return 0
        if not self._drain:
            return 0
        safe = self.safe_epoch()
        runnable: list[Callable[[], None]] = []
        with self._lock:
            while self._drain and self._drain[0][0] <= safe:
                runnable.append(self._drain.popleft()[1])
        if not runnable:
            return 0
        self._depth.v = depth + 1
        try:
            for fn in runnable:
                fn()
                self.actions_run += 1
        finally:
            self._depth.v = depth
        return len(runnable)

    def pending_actions(self) -> int:
        return len(self._drain)
