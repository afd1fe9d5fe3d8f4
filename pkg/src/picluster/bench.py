"""Benchmark harness: timed sweeps over workers x threads, averaging, speedup, CSV.

Each grid cell is timed ``runs`` times with a monotonic clock around the
whole call (dispatch through aggregation for remote tasks) and the
arithmetic mean is reported. Cells run one at a time, each completing all
of its runs before the next starts. The single-thread local baseline runs
first.
"""

from __future__ import annotations

import csv
import io
import os
import select
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .core import ClusterTopology, DenseVector, Matrix, SampleBudget, WorkerEndpoint
from .kernels import ComputePool, RngStreamSpec, matvec_parallel, mc_pi_parallel
from .master import Master, WorkerError

TASKS = ("matvec-local", "pi-local", "pi-remote-single", "pi-distributed")
LOCAL_TASKS = ("matvec-local", "pi-local")

CSV_HEADER = (
    "task",
    "workers",
    "threads_per_worker",
    "total_threads",
    "mean_seconds",
    "baseline_seconds",
    "speedup",
)


@dataclass(frozen=True)
class SweepSpec:
    task: str
    workers: range = range(1, 2)
    threads: range = range(1, 5)
    runs: int = 10
    samples: int = 10**6
    rows: int = 3000
    cols: int = 3000
    seed: int = 0
    discard_first: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if len(self.threads) == 0 or min(self.threads) < 1:
            raise ValueError("threads range must be non-empty and positive")
        if self.task == "pi-distributed" and (len(self.workers) == 0 or min(self.workers) < 1):
            raise ValueError("workers range must be non-empty and positive")

    @property
    def worker_counts(self) -> list[int]:
        if self.task in LOCAL_TASKS:
            return [0]
        if self.task == "pi-remote-single":
            return [1]
        return list(self.workers)

    def cells(self) -> list[tuple[int, int]]:
        return [(w, t) for w in self.worker_counts for t in self.threads]


@dataclass(frozen=True)
class BenchmarkRecord:
    task: str
    workers: int
    threads_per_worker: int
    total_threads: int
    mean_seconds: float
    baseline_seconds: float

    @property
    def speedup(self) -> float:
        return speedup(self.baseline_seconds, self.mean_seconds)

    def sort_key(self):
        return (self.task, self.workers, self.threads_per_worker)


class SweepAborted(RuntimeError):
    """A sweep stopped early; ``records`` holds the cells finished before the failure."""

    def __init__(self, records: list[BenchmarkRecord], cause: Exception):
        super().__init__(f"sweep incomplete after {len(records)} cells: {cause}")
        self.records = records
        self.cause = cause


def speedup(baseline_seconds: float, mean_seconds: float) -> float:
    if mean_seconds <= 0:
        raise ValueError("mean time must be positive")
    return baseline_seconds / mean_seconds


def make_record(task: str, workers: int, threads: int, mean_seconds: float, baseline_seconds: float) -> BenchmarkRecord:
    total = threads if workers == 0 else workers * threads
    return BenchmarkRecord(task, workers, threads, total, mean_seconds, baseline_seconds)


def records_from_means(
    task: str, means: Mapping[tuple[int, int], float], baseline_seconds: float | None = None
) -> list[BenchmarkRecord]:
    """Build records from already-measured mean times keyed by ``(workers, threads)``.

    Without an explicit baseline the single-thread cell is used.
    """
    if baseline_seconds is None:
        singles = [secs for (w, t), secs in means.items() if t == 1 and w <= 1]
        if not singles:
            raise ValueError("no single-thread cell to use as baseline")
        baseline_seconds = singles[0]
    return sorted(
        (make_record(task, w, t, secs, baseline_seconds) for (w, t), secs in means.items()),
        key=BenchmarkRecord.sort_key,
    )


def mean_time(fn: Callable[[], object], runs: int, discard_first: bool = False, clock=time.perf_counter) -> float:
    if discard_first:
        fn()
    total = 0.0
    for _ in range(runs):
        t0 = clock()
        fn()
        total += clock() - t0
    return total / runs


def run_sweep(
    spec: SweepSpec,
    topology: ClusterTopology | None = None,
    progress: Callable[[BenchmarkRecord], None] | None = None,
) -> list[BenchmarkRecord]:
    """Run every cell of ``spec`` and return one averaged record per cell.

    Raises :class:`SweepAborted` with the finished records if a worker fails.
    """
    needed = max(spec.worker_counts)
    if needed and (topology is None or len(topology) < needed):
        have = 0 if topology is None else len(topology)
        raise ValueError(f"task {spec.task} needs {needed} workers, topology has {have}")

    budget = SampleBudget(spec.samples, spec.seed)
    max_threads = max(spec.threads)
    records: list[BenchmarkRecord] = []

    with ComputePool(max_threads, name="bench") as pool:
        if spec.task == "matvec-local":
            m = Matrix.random(spec.rows, spec.cols, seed=spec.seed)
            v = DenseVector.random(spec.cols, seed=spec.seed + 1)

            def local_call(threads):
                return lambda: matvec_parallel(m, v, threads, pool)

        else:
            stream = RngStreamSpec(spec.seed, 0)

            def local_call(threads):
                return lambda: mc_pi_parallel(spec.samples, threads, stream, pool)

        # untimed pass: loads compiled kernels and starts the pool threads
        local_call(max_threads)()
        baseline = mean_time(local_call(1), spec.runs, spec.discard_first)

        if spec.task in LOCAL_TASKS:
            for _, threads in spec.cells():
                secs = baseline if threads == 1 else mean_time(local_call(threads), spec.runs, spec.discard_first)
                rec = make_record(spec.task, 0, threads, secs, baseline)
                records.append(rec)
                if progress:
                    progress(rec)
            return records

        with Master(topology.head(needed)) as master:
            try:
                master.connect()
                for workers, threads in spec.cells():
                    secs = mean_time(
                        lambda w=workers, t=threads: master.pi_distributed(budget, t, w),
                        spec.runs,
                        spec.discard_first,
                    )
                    rec = make_record(spec.task, workers, threads, secs, baseline)
                    records.append(rec)
                    if progress:
                        progress(rec)
            except WorkerError as exc:
                raise SweepAborted(records, exc) from exc
    return records


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def emit_csv(records: Iterable[BenchmarkRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in sorted(records, key=BenchmarkRecord.sort_key):
        writer.writerow(
            (
                r.task,
                r.workers,
                r.threads_per_worker,
                r.total_threads,
                _fmt(r.mean_seconds),
                _fmt(r.baseline_seconds),
                _fmt(r.speedup),
            )
        )
    return buf.getvalue()


def parse_csv(text: str) -> list[BenchmarkRecord]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        BenchmarkRecord(
            row["task"],
            int(row["workers"]),
            int(row["threads_per_worker"]),
            int(row["total_threads"]),
            float(row["mean_seconds"]),
            float(row["baseline_seconds"]),
        )
        for row in rows
    ]


def format_table(records: Iterable[BenchmarkRecord]) -> str:
    """Plain-text table with time and speedup columns, one line per cell."""
    lines = [f"{'workers':>7} {'threads':>7} {'total':>5} {'time (s)':>12} {'speedup':>8}"]
    for r in sorted(records, key=BenchmarkRecord.sort_key):
        lines.append(
            f"{r.workers:>7} {r.threads_per_worker:>7} {r.total_threads:>5} "
            f"{r.mean_seconds:>12.4f} {r.speedup:>8.2f}"
        )
    return "\n".join(lines)


def format_local_vs_remote(local: Iterable[BenchmarkRecord], remote: Iterable[BenchmarkRecord]) -> str:
    """Pi task: local execution on the master next to remote execution on one worker."""
    by_threads = {r.threads_per_worker: r.mean_seconds for r in remote}
    lines = ["Pi estimation timing, seconds", f"{'threads':>7} {'local':>12} {'remote':>12}"]
    for r in sorted(local, key=BenchmarkRecord.sort_key):
        remote_s = by_threads.get(r.threads_per_worker)
        shown = f"{remote_s:>12.4f}" if remote_s is not None else f"{'-':>12}"
        lines.append(f"{r.threads_per_worker:>7} {r.mean_seconds:>12.4f} {shown}")
    return "\n".join(lines)


# -- loopback cluster -------------------------------------------------------


@dataclass
class LoopbackCluster:
    """Worker daemons running as child processes on 127.0.0.1."""

    topology: ClusterTopology
    processes: list[subprocess.Popen] = field(default_factory=list)
    log_paths: list[Path] = field(default_factory=list)

    def alive(self) -> list[int]:
        return [p.pid for p in self.processes if p.poll() is None]

    def close(self, timeout: float = 5.0):
        for p in self.processes:
            if p.poll() is None:
                p.send_signal(signal.SIGTERM)
        deadline = time.monotonic() + timeout
        for p in self.processes:
            try:
                p.wait(max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
            if p.stdout:
                p.stdout.close()
        for path in self.log_paths:
            path.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _child_env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def _await_listen_line(proc: subprocess.Popen, deadline: float) -> tuple[str, int]:
    buf = b""
    fd = proc.stdout.fileno()
    while b"\n" not in buf:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise RuntimeError("worker did not report its address in time")
        ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
        if ready:
            chunk = os.read(fd, 4096)
            if not chunk:
                raise RuntimeError(f"worker exited during startup (code {proc.wait()})")
            buf += chunk
        elif proc.poll() is not None:
            raise RuntimeError(f"worker exited during startup (code {proc.returncode})")
    line = buf.split(b"\n", 1)[0].decode()
    word, _, hostport = line.partition(" ")
    if word != "listening":
        raise RuntimeError(f"unexpected worker startup output {line!r}")
    host, _, port = hostport.rpartition(":")
    return host, int(port)


def spawn_loopback_cluster(
    n_workers: int,
    base_port: int | None = None,
    max_threads: int = 4,
    startup_timeout: float = 60.0,
) -> LoopbackCluster:
    """Start ``n_workers`` daemons on 127.0.0.1 and wait until each answers Ping.

    Worker ``i`` listens on ``base_port + i``; with ``base_port=None`` each
    picks a free port and reports it. On any failure every child already
    started is torn down before the error propagates.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    cluster = LoopbackCluster(ClusterTopology())
    deadline = time.monotonic() + startup_timeout
    endpoints = []
    try:
        for i in range(n_workers):
            port = 0 if base_port is None else base_port + i
            fd, log_name = tempfile.mkstemp(prefix=f"picluster-w{i}-", suffix=".log")
            log_path = Path(log_name)
            cluster.log_paths.append(log_path)
            with os.fdopen(fd, "wb") as log_file:
                proc = subprocess.Popen(
                    [
                        sys.executable,
                        "-m",
                        "picluster.worker",
                        "--listen",
                        f"127.0.0.1:{port}",
                        "--max-threads",
                        str(max_threads),
                    ],
                    stdout=subprocess.PIPE,
                    stderr=log_file,
                    stdin=subprocess.DEVNULL,
                    env=_child_env(),
                )
            cluster.processes.append(proc)
        for i, proc in enumerate(cluster.processes):
            try:
                host, port = _await_listen_line(proc, deadline)
            except RuntimeError as exc:
                tail = cluster.log_paths[i].read_text(errors="replace")[-500:]
                raise RuntimeError(f"loopback worker w{i}: {exc}\n{tail}") from None
            endpoints.append(WorkerEndpoint(f"w{i}", host, port))
        cluster.topology = ClusterTopology(tuple(endpoints), "loopback-master")
        with Master(cluster.topology, timeout=max(1.0, deadline - time.monotonic())) as master:
            master.ping()
    except BaseException:
        cluster.close()
        raise
    return cluster
