"""
Delay scheduler: holds delayed frames and releases them in release-time
order, ties in submission order.
"""

import heapq
import itertools
import threading
import time
from typing import Any, Callable, List, Optional, Tuple

from common_functions import get_logger

logger = get_logger(__name__, "scheduler.log")


class DelayScheduler:
  """
  Arguments:
    release: called with each item when it is due.
    clock: time source for release times; monotonic seconds by default.

  Items can be drained synchronously with drain_due(now), or by a
  background thread after start().
  """

  def __init__(self, release: Optional[Callable[[Any], None]] = None,
               clock: Callable[[], float] = time.monotonic):
    self.release = release
    self.clock = clock
    self._heap: List[Tuple[float, int, Any]] = []
    self._counter = itertools.count()
    self._condition = threading.Condition()
    self._thread: Optional[threading.Thread] = None
    self._running = False

  def submit(self, item: Any, release_time: float):
    with self._condition:
      heapq.heappush(self._heap, (release_time, next(self._counter), item))
      self._condition.notify()

  def _emit(self, items: List[Any]):
    if self.release is None:
      return
    for item in items:
      try:
        self.release(item)
      except Exception as e:
        logger.error(f"Release callback failed: {e}")

  def drain_due(self, now: Optional[float] = None) -> List[Any]:
    "Releases and returns every item due at `now`"

    now = self.clock() if now is None else now
    due = []
    with self._condition:
      while self._heap and self._heap[0][0] <= now:
        due.append(heapq.heappop(self._heap)[2])
    self._emit(due)
    return due

  def drain_all(self) -> List[Any]:
    with self._condition:
      items = [entry[2] for entry in sorted(self._heap)]
      self._heap.clear()
    self._emit(items)
    return items

  def next_release(self) -> Optional[float]:
    with self._condition:
      return self._heap[0][0] if self._heap else None

  @property
  def pending(self) -> int:
    with self._condition:
      return len(self._heap)

  def _run(self):
    while True:
      with self._condition:
        while self._running:
          if not self._heap:
            self._condition.wait()
            continue
          wait = self._heap[0][0] - self.clock()
          if wait <= 0:
            break
          self._condition.wait(wait)
        if not self._running:
          return
        due = []
        now = self.clock()
        while self._heap and self._heap[0][0] <= now:
          due.append(heapq.heappop(self._heap)[2])
      self._emit(due)

  def start(self):
    if self._thread is not None:
      return
    self._running = True
    self._thread = threading.Thread(target = self._run, name = "delay-scheduler", daemon = True)
    self._thread.start()

  def stop(self, flush: bool = False) -> int:
    """
    Stops the release thread. Pending items are released immediately when
    flush is set and discarded otherwise. Returns how many were pending.
    """

    with self._condition:
      self._running = False
      self._condition.notify_all()
    if self._thread is not None:
      self._thread.join()
      self._thread = None
    pending = self.pending
    if flush:
      self.drain_all()
    else:
      with self._condition:
        self._heap.clear()
    if pending:
      logger.info(f"Scheduler stopped with {pending} pending items ({'flushed' if flush else 'discarded'})")
    return pending
