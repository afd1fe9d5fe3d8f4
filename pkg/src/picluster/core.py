"""Domain types shared across the package and the partitioning arithmetic.

Everything here is immutable once built. Matrices are stored row-major
because the unit of work distribution is the row.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

U64_MAX = 2**64 - 1


def _frozen_f64(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Matrix:
    """Dense row-major float64 matrix."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"matrix shape must be positive, got {self.rows}x{self.cols}")
        data = _frozen_f64(self.data)
        if data.size != self.rows * self.cols:
            raise ValueError(
                f"matrix data has {data.size} elements, expected {self.rows * self.cols}"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "Matrix":
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("from_rows expects a rectangular 2-D sequence")
        return cls(arr.shape[0], arr.shape[1], arr)

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(n, n, np.eye(n))

    @classmethod
    def random(cls, rows: int, cols: int, seed: int = 0) -> "Matrix":
        rng = np.random.default_rng(seed)
        return cls(rows, cols, rng.uniform(-1.0, 1.0, rows * cols))

    def as_array(self) -> np.ndarray:
        """Read-only (rows, cols) view of the data."""
        return self.data.reshape(self.rows, self.cols)

    def row_block(self, start: int, count: int) -> np.ndarray:
        if start < 0 or count < 0 or start + count > self.rows:
            raise ValueError(f"row block [{start}, {start + count}) outside 0..{self.rows}")
        return self.as_array()[start : start + count]

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DenseVector:
    data: np.ndarray

    def __post_init__(self):
        data = _frozen_f64(self.data)
        if data.size < 1:
            raise ValueError("vector must have at least one element")
        object.__setattr__(self, "data", data)

    @classmethod
    def random(cls, n: int, seed: int = 0) -> "DenseVector":
        return cls(np.random.default_rng(seed).uniform(-1.0, 1.0, n))

    def __len__(self) -> int:
        return int(self.data.size)

    def tolist(self) -> list[float]:
        return self.data.tolist()

    def __eq__(self, other):
        # Bitwise comparison: parallel and distributed paths promise bit-identical output.
        if not isinstance(other, DenseVector):
            return NotImplemented
        return self.data.tobytes() == other.data.tobytes()

    __hash__ = None


@dataclass(frozen=True)
class PartitionPlan:
    shares: tuple[int, ...]
    total: int

    def __post_init__(self):
        object.__setattr__(self, "shares", tuple(int(s) for s in self.shares))
        if not self.shares:
            raise ValueError("a plan needs at least one shard")
        if any(s < 0 for s in self.shares):
            raise ValueError("shares must be non-negative")
        if sum(self.shares) != self.total:
            raise ValueError(f"shares sum to {sum(self.shares)}, not {self.total}")

    def __len__(self) -> int:
        return len(self.shares)

    def ranges(self) -> list[tuple[int, int]]:
        return [shard_row_range(self, i) for i in range(len(self.shares))]


def partition(total: int, shards: int) -> PartitionPlan:
    """Split ``total`` items into ``shards`` contiguous, balanced shares.

    The remainder goes to the leading shards, so ``partition(10, 3)`` is
    ``[4, 3, 3]``. Shards beyond ``total`` are empty.
    """
    if shards < 1:
        raise ValueError(f"shards must be >= 1, got {shards}")
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    base, extra = divmod(total, shards)
    shares = tuple(base + 1 if i < extra else base for i in range(shards))
    return PartitionPlan(shares, total)


def shard_row_range(plan: PartitionPlan, shard_index: int) -> tuple[int, int]:
    """Return ``(start, count)`` of shard ``shard_index`` within ``plan``."""
    if not 0 <= shard_index < len(plan.shares):
        raise ValueError(f"shard index {shard_index} out of range for {len(plan.shares)} shards")
    start = sum(plan.shares[:shard_index])
    return start, plan.shares[shard_index]


@dataclass(frozen=True)
class WorkerEndpoint:
    name: str
    host: str
    port: int

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass(frozen=True)
class ClusterTopology:
    workers: tuple[WorkerEndpoint, ...] = ()
    master_name: str = "master"

    def __post_init__(self):
        object.__setattr__(self, "workers", tuple(self.workers))
        names = [w.name for w in self.workers]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate worker names: {', '.join(dupes)}")

    def __len__(self) -> int:
        return len(self.workers)

    def head(self, n: int) -> "ClusterTopology":
        """Topology restricted to the first ``n`` workers."""
        if n > len(self.workers):
            raise ValueError(f"topology has {len(self.workers)} workers, {n} requested")
        return ClusterTopology(self.workers[:n], self.master_name)

    def to_text(self) -> str:
        return "".join(f"{w.name} {w.host}:{w.port}\n" for w in self.workers)


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    host = host.strip("[]")
    try:
        port_num = int(port)
    except ValueError:
        raise ValueError(f"bad port in {text!r}") from None
    if not 0 <= port_num <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host, port_num


def parse_topology(lines: Iterable[str], master_name: str = "master") -> ClusterTopology:
    """Parse ``name host:port`` lines. ``#`` starts a comment."""
    workers = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'name host:port', got {raw.strip()!r}")
        try:
            host, port = parse_hostport(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        workers.append(WorkerEndpoint(parts[0], host, port))
    return ClusterTopology(tuple(workers), master_name)


def load_topology(path: str | Path, master_name: str = "master") -> ClusterTopology:
    with open(path, encoding="utf-8") as fh:
        return parse_topology(fh, master_name)


@dataclass(frozen=True)
class SampleBudget:
    total_samples: int
    base_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.total_samples <= U64_MAX:
            raise ValueError(f"total_samples must be in [1, 2**64), got {self.total_samples}")
        if not 0 <= self.base_seed <= U64_MAX:
            raise ValueError(f"base_seed must fit in 64 bits, got {self.base_seed}")


@dataclass(frozen=True)
class PiEstimate:
    value: float
    samples_used: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 4.0:
            raise ValueError(f"pi estimate {self.value} outside [0, 4]")
        if self.samples_used < 0:
            raise ValueError("samples_used must be non-negative")

