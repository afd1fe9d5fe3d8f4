import math
import os
import threading

import pytest

from picluster.bench import spawn_loopback_cluster
from picluster.worker import WorkerConfig, WorkerServer

# standard deviation of 4*sqrt(1 - U**2) for U ~ U[0, 1): E[X^2] = 16 * (2/3)
MC_SIGMA = math.sqrt(32.0 / 3.0 - math.pi**2)


def mc_standard_error(n: int) -> float:
    return MC_SIGMA / math.sqrt(n)


def physical_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@pytest.fixture(scope="session")
def loopback3():
    with spawn_loopback_cluster(3) as cluster:
        yield cluster


@pytest.fixture
def worker_server():
    """In-process worker daemon on an ephemeral port; yields the server."""
    servers = []

    def start(**kwargs):
        config = WorkerConfig("127.0.0.1", 0, **kwargs)
        server = WorkerServer(config)
        server.worker.warmup()
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append((server, thread))
        return server

    yield start
    for server, thread in servers:
        server.shutdown()
        server.server_close()
        thread.join(5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
