import threading
import time

from scheduler import DelayScheduler


class FakeClock:
  def __init__(self, now = 0.0):
    self.now = now

  def __call__(self):
    return self.now


def test_release_order_by_time_then_submission():
  released = []
  clock = FakeClock(100.0)
  scheduler = DelayScheduler(released.append, clock)
  scheduler.submit("f1", 102.0)
  scheduler.submit("f2", 101.0)
  scheduler.submit("f3", 101.0)

  assert scheduler.drain_due(100.5) == []
  assert scheduler.next_release() == 101.0
  assert scheduler.drain_due(101.0) == ["f2", "f3"]
  clock.now = 103.0
  assert scheduler.drain_due() == ["f1"]
  assert released == ["f2", "f3", "f1"]
  assert scheduler.pending == 0

def test_empty_scheduler():
  scheduler = DelayScheduler()

  assert scheduler.drain_due(1e9) == []
  assert scheduler.drain_all() == []
  assert scheduler.next_release() is None

def test_drain_all_keeps_order():
  scheduler = DelayScheduler()
  scheduler.submit("late", 5.0)
  scheduler.submit("early", 1.0)

  assert scheduler.drain_all() == ["early", "late"]

def test_failing_release_does_not_stop_others():
  released = []

  def release(item):
    if item == "bad":
      raise RuntimeError("boom")
    released.append(item)

  scheduler = DelayScheduler(release)
  scheduler.submit("bad", 0.0)
  scheduler.submit("good", 0.0)
  scheduler.drain_due(1.0)

  assert released == ["good"]

def test_background_thread_releases_when_due():
  released = []
  done = threading.Event()

  def release(item):
    released.append((item, time.monotonic()))
    if len(released) == 2:
      done.set()

  scheduler = DelayScheduler(release)
  scheduler.start()
  start = time.monotonic()
  scheduler.submit("slow", start + 0.2)
  scheduler.submit("fast", start + 0.05)

  assert done.wait(2.0)
  scheduler.stop()
  assert [item for item, _ in released] == ["fast", "slow"]
  assert released[1][1] - start >= 0.2 - 0.005

def test_stop_flushes_or_discards():
  released = []
  scheduler = DelayScheduler(released.append)
  scheduler.start()
  scheduler.submit("a", time.monotonic() + 60)
  assert scheduler.stop(flush = True) == 1
  assert released == ["a"]

  scheduler = DelayScheduler(released.append)
  scheduler.start()
  scheduler.submit("b", time.monotonic() + 60)
  assert scheduler.stop(flush = False) == 1
  assert released == ["a"]
