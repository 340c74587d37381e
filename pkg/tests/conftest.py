"""Shared fixtures: in-process mock services and prebuilt pipeline workspaces."""
from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from kgrag.embed import HashEncoder
from kgrag.kg import build_graph


class MockService:
    """Tiny JSON-over-HTTP server driven by per-route handler callables."""

    def __init__(self):
        self.routes = {}
        self.requests: list[tuple[str, dict]] = []
        self._fail_plan: list[int] = []
        self._lock = threading.Lock()

        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                with service._lock:
                    service.requests.append((self.path, body))
                    if service._fail_plan:
                        status = service._fail_plan.pop(0)
                        self.send_response(status)
                        self.end_headers()
                        return
                handler = service.routes.get(self.path)
                if handler is None:
                    self.send_response(404)
                    self.end_headers()
                    return
                try:
                    payload = handler(body)
                except Exception as exc:  # pragma: no cover - test plumbing
                    self.send_response(500)
                    self.end_headers()
                    self.wfile.write(str(exc).encode())
                    return
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def fail_next(self, count: int, status: int = 503) -> None:
        with self._lock:
            self._fail_plan.extend([status] * count)

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_service():
    service = MockService()
    yield service
    service.close()


@pytest.fixture
def mock_encoder_server():
    """Encoder endpoint backed by the deterministic hash encoder."""
    service = MockService()
    encoder = HashEncoder(dim=16)
    service.routes["/embed"] = lambda body: {
        "embeddings": encoder.encode(body["texts"]).tolist()
    }
    yield service
    service.close()


def question_of(messages: list[dict]) -> str:
    """Extract the question line from the last user message."""
    for message in reversed(messages):
        if message["role"] == "user":
            lines = message["content"].splitlines()
            for i, line in enumerate(lines):
                if line == "Question:" and i + 1 < len(lines):
                    return lines[i + 1]
    return ""


@pytest.fixture
def mock_llm_server():
    """Chat-completion endpoint replaying canned responses keyed by question."""
    service = MockService()
    service.responses = {}
    service.default_response = "ans: not available"

    def completions(body):
        question = question_of(body["messages"])
        content = service.responses.get(question, service.default_response)
        return {"choices": [{"message": {"content": content}}]}

    service.routes["/v1/chat/completions"] = completions
    yield service
    service.close()


@pytest.fixture
def chain_kg():
    """A -> B -> C with distinct relations."""
    return build_graph([("A", "r1", "B"), ("B", "r2", "C")])


def random_graph(rng: np.random.Generator, n_nodes: int, n_edges: int, n_relations: int = 4):
    """Random directed multigraph as surface triples (may include self loops)."""
    rows = []
    for _ in range(n_edges):
        h = int(rng.integers(n_nodes))
        t = int(rng.integers(n_nodes))
        r = int(rng.integers(n_relations))
        rows.append((f"n{h}", f"r{r}", f"n{t}"))
    return build_graph(rows)
