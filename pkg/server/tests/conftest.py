"""Fixtures for the service tests.

live_server boots the real app under uvicorn on an ephemeral port, so the
contract tests exercise actual HTTP, not an in-process test client. The
repo-level tests/ directory is put on sys.path for contract_suite, which
depends only on requests; nothing from the primary package is imported.
"""
from __future__ import annotations

import sys
import threading
import time
from pathlib import Path

import pytest
import uvicorn

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "tests"))

from contract_suite import ServiceCatalog

from embedserver.app import create_app


@pytest.fixture(scope="session")
def catalog() -> ServiceCatalog:
    # mirrors models.yaml
    return ServiceCatalog(
        embedder="hash-embed-small",
        embedder_dim=96,
        embedder_max_tokens=24,
        decoder="hash-decoder",
        wide_decoder="hash-decoder-wide",
    )


@pytest.fixture(scope="session")
def live_server():
    config = uvicorn.Config(create_app(), host="127.0.0.1", port=0, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("uvicorn did not start within 10s")
        time.sleep(0.02)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)
