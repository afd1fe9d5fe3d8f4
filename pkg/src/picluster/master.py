"""Master side: split a task across workers, call them concurrently, aggregate.

One dispatch lane (a thread holding one persistent connection) per worker.
The master never computes shards itself during a distributed run.
"""

from __future__ import annotations

import socket
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import protocol as proto
from .core import ClusterTopology, DenseVector, Matrix, PiEstimate, SampleBudget, WorkerEndpoint, partition
from .kernels import (
    STREAMS_PER_WORKER,
    ComputePool,
    PartialEstimate,
    RngStreamSpec,
    combine_estimates,
    mc_pi_parallel,
)


class WorkerError(RuntimeError):
    """A worker was unreachable, broke protocol, or answered with an error."""

    def __init__(self, worker: str, detail: str):
        super().__init__(f"worker {worker}: {detail}")
        self.worker = worker
        self.detail = detail


@dataclass(frozen=True)
class WorkerCall:
    name: str
    shard: str
    seconds: float


@dataclass
class DispatchReport:
    calls: list[WorkerCall]
    wall_seconds: float
    result: Any = None
    model_request_bits: int = 0

    @property
    def max_call_seconds(self) -> float:
        return max((c.seconds for c in self.calls), default=0.0)

    def format(self) -> str:
        lines = [f"  {c.name:<12} {c.shard:<28} {c.seconds:.6f} s" for c in self.calls]
        lines.append(f"  total wall {self.wall_seconds:.6f} s")
        return "\n".join(lines)


def plan_pi_requests(
    n_workers: int, budget: SampleBudget, threads_per_worker: int
) -> list[proto.PiRequest]:
    """One request per worker; worker ``i`` gets stream block ``i * 2**16``.

    Entries with zero samples are kept so indices line up with workers; the
    dispatcher skips them.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if threads_per_worker < 1:
        raise ValueError("threads_per_worker must be >= 1")
    plan = partition(budget.total_samples, n_workers)
    return [
        proto.PiRequest(count, threads_per_worker, budget.base_seed, i * STREAMS_PER_WORKER)
        for i, count in enumerate(plan.shares)
    ]


def plan_matvec_requests(n_workers: int, m: Matrix, v: DenseVector) -> list[proto.MatvecRequest]:
    if n_workers < 1:
        raise ValueError("need at least one worker")
    if len(v) != m.cols:
        raise ValueError(f"vector length {len(v)} does not match matrix with {m.cols} columns")
    plan = partition(m.rows, n_workers)
    return [
        proto.MatvecRequest(start, count, m.cols, m.row_block(start, count), v.data)
        for start, count in plan.ranges()
    ]


class _Lane:
    def __init__(self, endpoint: WorkerEndpoint, timeout: float | None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.sock: socket.socket | None = None

    def connect(self):
        if self.sock is not None:
            return
        try:
            sock = socket.create_connection(self.endpoint.address, timeout=self.timeout)
        except OSError as exc:
            raise WorkerError(self.endpoint.name, f"cannot connect to {self.endpoint.host}:{self.endpoint.port}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def call(self, request: proto.Message) -> tuple[proto.Message, float]:
        self.connect()
        t0 = time.perf_counter()
        try:
            proto.send_message(self.sock, request)
            reply = proto.recv_message(self.sock)
        except (OSError, proto.ProtocolError) as exc:
            self.close()
            raise WorkerError(self.endpoint.name, f"{type(exc).__name__}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        if reply is None:
            self.close()
            raise WorkerError(self.endpoint.name, "connection closed before reply")
        if isinstance(reply, proto.ErrorReply):
            raise WorkerError(self.endpoint.name, f"error {reply.code}: {reply.message}")
        return reply, elapsed


class Master:
    """Holds one persistent connection per worker and issues calls in parallel.

    Use as a context manager. Not meant for concurrent use by several callers.
    """

    def __init__(self, topology: ClusterTopology, timeout: float | None = None):
        self.topology = topology
        self.lanes = [_Lane(w, timeout) for w in topology.workers]
        self._executor = ThreadPoolExecutor(max(1, len(self.lanes)), thread_name_prefix="lane")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        for lane in self.lanes:
            lane.close()
        self._executor.shutdown(wait=True)

    def connect(self, n: int | None = None):
        """Open connections up front so later timings exclude connection setup."""
        for lane in self.lanes[: n if n is not None else len(self.lanes)]:
            lane.connect()

    def _lanes(self, n: int | None) -> list[_Lane]:
        n = len(self.lanes) if n is None else n
        if n < 1:
            raise ValueError("need at least one worker")
        if n > len(self.lanes):
            raise ValueError(f"topology has {len(self.lanes)} workers, {n} requested")
        return self.lanes[:n]

    def dispatch(self, pairs: list[tuple[_Lane, proto.Message]], expect: type):
        """Send each request on its lane concurrently; wait for all; fail on the first bad lane."""
        t0 = time.perf_counter()
        futures = [self._executor.submit(lane.call, req) for lane, req in pairs]
        outcomes = []
        for f in futures:
            try:
                outcomes.append(f.result())
            except WorkerError as exc:
                outcomes.append(exc)
        wall = time.perf_counter() - t0
        for (lane, _), out in zip(pairs, outcomes):
            if isinstance(out, WorkerError):
                raise out
            if not isinstance(out[0], expect):
                lane.close()
                raise WorkerError(lane.endpoint.name, f"unexpected reply {type(out[0]).__name__}")
        return outcomes, wall

    def ping(self, n: int | None = None) -> float:
        lanes = self._lanes(n)
        _, wall = self.dispatch([(lane, proto.Ping()) for lane in lanes], proto.Pong)
        return wall

    def pi_distributed(
        self, budget: SampleBudget, threads_per_worker: int, workers: int | None = None
    ) -> tuple[PiEstimate, DispatchReport]:
        lanes = self._lanes(workers)
        requests = plan_pi_requests(len(lanes), budget, threads_per_worker)
        pairs = [(lane, req) for lane, req in zip(lanes, requests) if req.samples]
        outcomes, wall = self.dispatch(pairs, proto.PiResponse)
        parts = []
        calls = []
        for (lane, req), (reply, secs) in zip(pairs, outcomes):
            if reply.samples != req.samples:
                raise WorkerError(lane.endpoint.name, f"computed {reply.samples} samples, asked {req.samples}")
            try:
                parts.append(PartialEstimate(reply.estimate, reply.samples))
            except ValueError as exc:
                raise WorkerError(lane.endpoint.name, str(exc)) from None
            calls.append(WorkerCall(lane.endpoint.name, f"{req.samples} samples x{req.threads}", secs))
        estimate = combine_estimates(parts)
        report = DispatchReport(
            calls, wall, estimate, proto.payload_bits("model-pi-request", workers=len(pairs))
        )
        return estimate, report

    def matvec_distributed(
        self, m: Matrix, v: DenseVector, workers: int | None = None
    ) -> tuple[DenseVector, DispatchReport]:
        lanes = self._lanes(workers)
        requests = plan_matvec_requests(len(lanes), m, v)
        pairs = [(lane, req) for lane, req in zip(lanes, requests) if req.rows]
        outcomes, wall = self.dispatch(pairs, proto.MatvecResponse)
        out = np.empty(m.rows)
        calls = []
        for (lane, req), (reply, secs) in zip(pairs, outcomes):
            if (reply.start_row, reply.rows) != (req.start_row, req.rows):
                raise WorkerError(
                    lane.endpoint.name,
                    f"returned rows {reply.start_row}+{reply.rows}, asked {req.start_row}+{req.rows}",
                )
            out[req.start_row : req.start_row + req.rows] = reply.result
            calls.append(WorkerCall(lane.endpoint.name, f"rows {req.start_row}..{req.start_row + req.rows - 1}", secs))
        result = DenseVector(out)
        return result, DispatchReport(calls, wall, result)


def pi_distributed(
    topology: ClusterTopology, budget: SampleBudget, threads_per_worker: int
) -> tuple[PiEstimate, DispatchReport]:
    with Master(topology) as master:
        return master.pi_distributed(budget, threads_per_worker)


def matvec_distributed(
    topology: ClusterTopology, m: Matrix, v: DenseVector
) -> tuple[DenseVector, DispatchReport]:
    with Master(topology) as master:
        return master.matvec_distributed(m, v)


def pi_local(
    budget: SampleBudget, threads: int, pool: ComputePool | None = None
) -> tuple[PiEstimate, float]:
    """Run the pi task in-process on the master; uses stream block 0 like worker 0."""
    t0 = time.perf_counter()
    est = mc_pi_parallel(budget.total_samples, threads, RngStreamSpec(budget.base_seed, 0), pool)
    return est, time.perf_counter() - t0
