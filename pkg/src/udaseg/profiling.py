"""Runtime and memory-time accounting for a task.

Memory is the resident set size of this process, sampled on a background
thread.  The trace layout (seconds, MB) matches what a GPU sampler would
produce, so a device sampler can be passed in instead.
"""
from __future__ import annotations

import csv
import io
import threading
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ResourceTrace:
    times_s: list = field(default_factory=list)
    memory_mb: list = field(default_factory=list)

    def append(self, t, m):
        if self.times_s and t <= self.times_s[-1]:
            return
        self.times_s.append(float(t))
        self.memory_mb.append(max(float(m), 0.0))

    def area(self):
        return memory_time_area(self.times_s, self.memory_mb)

    def max_mb(self):
        return max(self.memory_mb) if self.memory_mb else 0.0


def memory_time_area(times_s, memory_mb) -> float:
    """Trapezoidal integral of memory over time, in MB*s."""
    t = np.asarray(times_s, dtype=float)
    m = np.asarray(memory_mb, dtype=float)
    if t.shape != m.shape:
        raise ValueError("times and memory samples differ in length")
    if t.size < 2:
        return 0.0
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample times must be strictly increasing")
    return float(np.sum(0.5 * (m[1:] + m[:-1]) * np.diff(t)))


def process_memory_mb() -> float:
    import psutil

    return psutil.Process().memory_info().rss / 2**20


@dataclass
class ProfileResult:
    trace: ResourceTrace
    runtime_s: float
    max_mb: float
    area_mb_s: float
    sampler_ok: bool
    result: object = None

    def row(self):
        return {"runtime_s": self.runtime_s, "max_mb": self.max_mb, "area_mb_s": self.area_mb_s,
                "sampler_ok": self.sampler_ok}


def profile_run(task, interval_s=0.1, sampler=process_memory_mb) -> ProfileResult:
    """Run ``task()`` while sampling memory every ``interval_s`` seconds.

    If the sampler fails the result carries runtime only and
    ``sampler_ok=False``.
    """
    trace = ResourceTrace()
    stop = threading.Event()
    state = {"ok": True}
    t0 = time.perf_counter()

    def sample():
        try:
            trace.append(time.perf_counter() - t0, sampler())
        except Exception:
            state["ok"] = False
            stop.set()

    def loop():
        while not stop.wait(interval_s):
            sample()

    sample()
    th = threading.Thread(target=loop, daemon=True)
    th.start()
    try:
        result = task()
    finally:
        runtime = time.perf_counter() - t0
        stop.set()
        th.join()
    if state["ok"]:
        sample()
    if not state["ok"]:
        return ProfileResult(ResourceTrace(), runtime, 0.0, 0.0, False, result)
    return ProfileResult(trace, runtime, trace.max_mb(), trace.area(), True, result)


def efficiency_table(rows, delimiter=",") -> str:
    """Rows of ``{case_id, image_size, runtime_s, max_mb, area_mb_s}``."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["Case ID", "Image Size", "Running Time (s)", "Max Memory (MB)", "Total Memory (MB*s)"])
    for r in rows:
        size = "(" + ", ".join(str(int(s)) for s in r["image_size"]) + ")"
        w.writerow([r["case_id"], size, f"{r['runtime_s']:.2f}", f"{r['max_mb']:.0f}", f"{r['area_mb_s']:.0f}"])
    return buf.getvalue()
