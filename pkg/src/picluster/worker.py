"""Worker daemon: accepts master connections and runs kernel requests.

The daemon binds its port, runs a warm-up pass (compiles the mat-vec
kernel and starts the compute threads), and only then begins accepting
connections. Each connection is served one request at a time.
"""

from __future__ import annotations

import logging
import signal
import socket
import socketserver
import sys
import threading
import time
from dataclasses import dataclass

from . import protocol as proto
from .core import DenseVector, Matrix
from .kernels import ComputePool, RngStreamSpec, matvec_parallel, mc_pi_parallel

log = logging.getLogger("picluster.worker")

WARMUP_ROWS = 64
WARMUP_SAMPLES = 1 << 14


@dataclass(frozen=True)
class WorkerConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    max_threads: int = 4
    warmup_threads: int = 4

    def __post_init__(self):
        if self.max_threads < 1:
            raise ValueError("max_threads must be >= 1")
        if self.warmup_threads < 0:
            raise ValueError("warmup_threads must be >= 0")


class Worker:
    """Request execution state shared by every connection of one daemon."""

    def __init__(self, config: WorkerConfig):
        self.config = config
        self.pool = ComputePool(config.max_threads, name="worker")
        self.warmed_up = threading.Event()

    def warmup(self):
        threads = min(self.config.warmup_threads, self.config.max_threads)
        if threads < 1:
            self.warmed_up.set()
            return
        try:
            m = Matrix.random(WARMUP_ROWS, WARMUP_ROWS, seed=1)
            v = DenseVector.random(WARMUP_ROWS, seed=2)
            matvec_parallel(m, v, threads, self.pool)
            mc_pi_parallel(WARMUP_SAMPLES, threads, RngStreamSpec(0, 0), self.pool)
            self.pool.prestart(threads)
        except Exception:
            log.exception("warm-up failed; continuing without it")
        self.warmed_up.set()

    def clamp_threads(self, requested: int) -> int:
        return min(requested, self.config.max_threads)

    def handle(self, msg: proto.Message) -> proto.Message:
        """Compute the reply for one decoded request."""
        try:
            if isinstance(msg, proto.Ping):
                return proto.Pong()
            if isinstance(msg, proto.Warmup):
                self.warmup()
                return proto.WarmupDone()
            if isinstance(msg, proto.PiRequest):
                stream = RngStreamSpec(msg.base_seed, msg.stream_base)
                est = mc_pi_parallel(msg.samples, self.clamp_threads(msg.threads), stream, self.pool)
                return proto.PiResponse(est.value, est.samples_used)
            if isinstance(msg, proto.MatvecRequest):
                m = Matrix(msg.rows, msg.cols, msg.row_data)
                result = matvec_parallel(m, DenseVector(msg.vector), self.config.max_threads, self.pool)
                return proto.MatvecResponse(msg.start_row, msg.rows, result.data)
        except ValueError as exc:
            return proto.ErrorReply(proto.ErrorCode.INVALID_ARGUMENT, str(exc))
        except Exception as exc:
            log.exception("request failed")
            return proto.ErrorReply(proto.ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")
        return proto.ErrorReply(proto.ErrorCode.UNSUPPORTED, f"{type(msg).__name__} is not a request")

    def close(self):
        self.pool.shutdown()


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        worker: Worker = self.server.worker
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                msg = proto.recv_message(sock)
            except proto.ProtocolError as exc:
                log.warning("closing connection from %s:%s: %s", *self.client_address[:2], exc)
                return
            except OSError:
                return
            if msg is None:
                return
            t0 = time.perf_counter()
            reply = worker.handle(msg)
            try:
                proto.send_message(sock, reply)
            except OSError:
                return
            micros = (time.perf_counter() - t0) * 1e6
            log.info("%s %d us", type(msg).__name__, micros)


class WorkerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: WorkerConfig):
        self.worker = Worker(config)
        super().__init__((config.listen_host, config.listen_port), _ConnectionHandler)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def server_close(self):
        super().server_close()
        self.worker.close()


def serve(config: WorkerConfig, ready=None):
    """Bind, warm up, then serve until SIGTERM/SIGINT.

    ``ready`` is called with the bound ``(host, port)`` once warm-up is done.
    """
    try:
        server = WorkerServer(config)
    except OSError as exc:
        raise RuntimeError(
            f"cannot listen on {config.listen_host}:{config.listen_port}: {exc}"
        ) from exc

    def _terminate(signum, frame):
        raise SystemExit(0)

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, _terminate)
    with server:
        server.worker.warmup()
        if ready is not None:
            ready(server.address)
        try:
            server.serve_forever()
        except (KeyboardInterrupt, SystemExit):
            pass


def main(argv=None):
    import argparse

    from .core import parse_hostport

    parser = argparse.ArgumentParser(prog="picluster worker", description="Run a worker daemon.")
    parser.add_argument("--listen", default="127.0.0.1:0", help="HOST:PORT to bind (port 0 picks one)")
    parser.add_argument("--max-threads", type=int, default=4)
    parser.add_argument("--warmup-threads", type=int, default=4)
    args = parser.parse_args(argv)

    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(asctime)s %(message)s")
    host, port = parse_hostport(args.listen)
    config = WorkerConfig(host, port, args.max_threads, args.warmup_threads)

    def announce(address):
        print(f"listening {address[0]}:{address[1]}", flush=True)

    try:
        serve(config, ready=announce)
    except RuntimeError as exc:
        print(f"worker: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
