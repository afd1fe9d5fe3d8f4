"""Command line entry point: ``picluster {worker,run,advise,bench}``."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import bench, costmodel, master, worker
from .core import DenseVector, Matrix, SampleBudget, load_topology
from .kernels import matvec_sequential


def parse_range(text: str) -> range:
    """``"A..B"`` (inclusive) or a single ``"A"``."""
    lo, sep, hi = text.partition("..")
    try:
        start = int(lo)
        stop = int(hi) if sep else start
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B or A, got {text!r}") from None
    if stop < start:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return range(start, stop + 1)


def _samples(text: str) -> int:
    # accepts 1.2e8 style as well as plain integers
    value = float(text) if any(c in text for c in ".eE") else int(text)
    if value != int(value) or value < 1:
        raise argparse.ArgumentTypeError(f"sample count must be a positive integer, got {text!r}")
    return int(value)


def cmd_run(args) -> int:
    topology = load_topology(args.topology)
    if not topology.workers:
        print("run: topology lists no workers", file=sys.stderr)
        return 2
    try:
        with master.Master(topology) as m:
            if args.task == "pi":
                t0 = time.perf_counter()
                est, report = m.pi_distributed(SampleBudget(args.samples, args.seed), args.threads_per_worker)
                total = time.perf_counter() - t0
                print(f"estimate {est.value:.15f}  samples {est.samples_used}  error {abs(est.value - np.pi):.3e}")
                print(f"model-accounting request payload {report.model_request_bits} bits")
            else:
                mat = Matrix.random(args.rows, args.cols, seed=args.seed)
                vec = DenseVector.random(args.cols, seed=args.seed + 1)
                t0 = time.perf_counter()
                result, report = m.matvec_distributed(mat, vec)
                total = time.perf_counter() - t0
                ok = result == matvec_sequential(mat, vec)
                print(f"checksum {float(np.sum(result.data)):.17g}  matches local: {'yes' if ok else 'NO'}")
    except master.WorkerError as exc:
        print(f"run: {exc}", file=sys.stderr)
        return 1
    print(report.format())
    print(f"total {total:.6f} s")
    return 0


def cmd_advise(args) -> int:
    try:
        advice = costmodel.advise_offload(
            args.bits, args.bandwidth_bps, args.local_seconds, args.speedup, args.latency
        )
    except ValueError as exc:
        print(f"advise: {exc}", file=sys.stderr)
        return 2
    print(advice.rationale)
    print(advice.machine_line())
    return 0


def cmd_bench(args) -> int:
    spec = bench.SweepSpec(
        task=args.task,
        workers=args.workers,
        threads=args.threads,
        runs=args.runs,
        samples=args.samples,
        rows=args.rows,
        cols=args.cols,
        seed=args.seed,
        discard_first=args.discard_first,
    )
    cluster = None
    topology = None
    if args.topology:
        topology = load_topology(args.topology)
    elif args.loopback:
        cluster = bench.spawn_loopback_cluster(args.loopback, max_threads=max(spec.threads))
        topology = cluster.topology

    def progress(rec):
        print(
            f"{rec.task} workers={rec.workers} threads={rec.threads_per_worker} "
            f"mean={rec.mean_seconds:.6f}s speedup={rec.speedup:.2f}",
            file=sys.stderr,
        )

    complete = True
    try:
        records = bench.run_sweep(spec, topology, progress)
    except bench.SweepAborted as exc:
        print(f"bench: {exc}", file=sys.stderr)
        records = exc.records
        complete = False
    except ValueError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 2
    finally:
        if cluster is not None:
            cluster.close()

    text = bench.emit_csv(records)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    print(bench.format_table(records), file=sys.stderr)
    if spec.task not in bench.LOCAL_TASKS:
        print("baseline: single-thread local run on the master", file=sys.stderr)
    if max(spec.threads) > costmodel.RECOMMENDED_THREADS_PER_WORKER:
        print(
            f"note: on quad-core nodes, speedup flattens at 4 threads per node; "
            f"{costmodel.RECOMMENDED_THREADS_PER_WORKER} threads per worker is the suggested limit",
            file=sys.stderr,
        )
    return 0 if complete else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="picluster", description="Master/worker compute cluster toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    w = sub.add_parser("worker", help="run a worker daemon")
    w.add_argument("--listen", default="127.0.0.1:0")
    w.add_argument("--max-threads", type=int, default=4)
    w.add_argument("--warmup-threads", type=int, default=4)

    r = sub.add_parser("run", help="run one distributed task")
    r.add_argument("task", choices=("pi", "matvec"))
    r.add_argument("--topology", required=True)
    r.add_argument("--samples", type=_samples, default=10**7)
    r.add_argument("--rows", type=int, default=3000)
    r.add_argument("--cols", type=int, default=3000)
    r.add_argument(
        "--threads-per-worker",
        type=int,
        default=4,
        help="threads per worker for pi; matvec shards use each worker's --max-threads",
    )
    r.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("advise", help="offload advice from the ideal-link cost model")
    a.add_argument("--bits", type=int, required=True)
    a.add_argument("--bandwidth-bps", type=float, default=costmodel.FAST_ETHERNET_BPS)
    a.add_argument("--local-seconds", type=float, required=True)
    a.add_argument("--speedup", type=float, required=True)
    a.add_argument("--latency", type=float, default=0.0, help="fixed per-call latency, seconds")

    b = sub.add_parser("bench", help="timed sweep, CSV output")
    b.add_argument("--task", choices=bench.TASKS, required=True)
    b.add_argument("--workers", type=parse_range, default=range(1, 2))
    b.add_argument("--threads", type=parse_range, default=range(1, 5))
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--samples", type=_samples, default=10**7)
    b.add_argument("--rows", type=int, default=3000)
    b.add_argument("--cols", type=int, default=3000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--discard-first", action="store_true")
    src = b.add_mutually_exclusive_group()
    src.add_argument("--topology")
    src.add_argument("--loopback", type=int, metavar="K")
    b.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "worker":
        forwarded = ["--listen", args.listen, "--max-threads", str(args.max_threads)]
        forwarded += ["--warmup-threads", str(args.warmup_threads)]
        return worker.main(forwarded)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "advise":
        return cmd_advise(args)
    return cmd_bench(args)


if __name__ == "__main__":
    sys.exit(main())
