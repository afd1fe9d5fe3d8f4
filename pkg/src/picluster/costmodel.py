"""Ideal-link communication cost and the offload decision built on it.

Transfer time is payload bits divided by link bandwidth, with no framing,
marshaling or contention. An optional fixed latency lets callers probe
sensitivity; it defaults to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

FAST_ETHERNET_BPS = 10**8

# Observed on quad-core nodes: the fourth thread per node buys little because
# it competes with OS processes. Reported as guidance only.
RECOMMENDED_THREADS_PER_WORKER = 3


@dataclass(frozen=True)
class TransferEstimate:
    bits: int
    bandwidth_bps: float
    seconds: float


@dataclass(frozen=True)
class OffloadAdvice:
    local_seconds: float
    transfer_seconds: float
    ideal_remote_compute_seconds: float
    recommended: bool
    rationale: str

    @property
    def remote_seconds(self) -> float:
        return self.transfer_seconds + self.ideal_remote_compute_seconds

    def machine_line(self) -> str:
        return (
            f"recommended={'true' if self.recommended else 'false'} "
            f"transfer_s={self.transfer_seconds:.6g} "
            f"remote_compute_s={self.ideal_remote_compute_seconds:.6g} "
            f"local_s={self.local_seconds:.6g}"
        )


def transfer_time(bits: int, bandwidth_bps: float, latency_seconds: float = 0.0) -> TransferEstimate:
    if bandwidth_bps <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_bps}")
    if bits < 0:
        raise ValueError(f"bits must be non-negative, got {bits}")
    if latency_seconds < 0:
        raise ValueError("latency must be non-negative")
    seconds = bits / bandwidth_bps
    if latency_seconds:
        seconds += latency_seconds
    return TransferEstimate(bits, bandwidth_bps, seconds)


def advise_offload(
    task_bits: int,
    bandwidth_bps: float,
    local_seconds: float,
    speedup_factor: float,
    latency_seconds: float = 0.0,
) -> OffloadAdvice:
    """Decide whether shipping a task to the cluster beats running it locally.

    Remote time is the ideal transfer time plus ``local_seconds / speedup_factor``.
    Offloading is recommended only when that is strictly less than local time.
    """
    for name, value in (
        ("task_bits", task_bits),
        ("bandwidth_bps", bandwidth_bps),
        ("local_seconds", local_seconds),
        ("speedup_factor", speedup_factor),
    ):
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")
    transfer = transfer_time(task_bits, bandwidth_bps, latency_seconds).seconds
    remote_compute = local_seconds / speedup_factor
    recommended = transfer + remote_compute < local_seconds
    verdict = "offload" if recommended else "compute locally"
    rationale = (
        f"{verdict}: transfer {transfer:.6g} s + remote compute {remote_compute:.6g} s "
        f"= {transfer + remote_compute:.6g} s vs local {local_seconds:.6g} s"
    )
    return OffloadAdvice(local_seconds, transfer, remote_compute, recommended, rationale)
