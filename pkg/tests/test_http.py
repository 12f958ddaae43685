"""HTTP scorer: wire protocol, retry policy, and shim conformance.

Two independently written servers (one on http.server, one as a WSGI app)
wrap the same reference scorer so the transport layer can be checked for
value fidelity, not just status handling.
"""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from wsgiref.simple_server import WSGIServer, make_server

import pytest

from kcforge import (
    BigramScorer,
    HttpScorer,
    ProtocolError,
    ScoreRequest,
    TransportError,
)

REFERENCE_TRAINING = "students learn knowledge components through practice " * 4

CONFORMANCE_SUITE = [
    ("", ""),
    ("", "What is cognitive task analysis?"),
    ("What is CTA?", "Feedback should be immediate."),
    ("a", "a"),
    ("multi\nline\ncontext", "and a continuation"),
    ("", "é→汉 unicode continuation"),
    ("trailing space ", " leading space"),
    ("x" * 200, "y" * 100),
    ("shared prefix", "shared prefix"),
    ("", "."),
]


class _HttpServerShim:
    """Shim A: http.server handler translating /v1/score to a scorer call."""

    def __init__(self, scorer):
        shim = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                if self.path != "/v1/score":
                    self._reply(404, {"error": "not found"})
                    return
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length).decode("utf-8"))
                    req = ScoreRequest(body["context"], body["continuation"])
                except (ValueError, KeyError, TypeError):
                    self._reply(400, {"error": "bad request body"})
                    return
                result = shim.scorer.score(req)
                self._reply(200, {
                    "logprob": result.logprob,
                    "token_count": result.token_count,
                    "model_id": result.model_id,
                })

            def _reply(self, status, payload):
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.scorer = scorer
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)

    def __enter__(self):
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return f"http://127.0.0.1:{self.server.server_port}"

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


class _WsgiShim:
    """Shim B: the same protocol as a WSGI application on wsgiref."""

    def __init__(self, scorer):
        def app(environ, start_response):
            if environ["PATH_INFO"] != "/v1/score" or environ["REQUEST_METHOD"] != "POST":
                return _json_response(start_response, "404 Not Found", {"error": "not found"})
            try:
                size = int(environ.get("CONTENT_LENGTH") or 0)
                body = json.loads(environ["wsgi.input"].read(size).decode("utf-8"))
                req = ScoreRequest(body["context"], body["continuation"])
            except (ValueError, KeyError, TypeError):
                return _json_response(start_response, "400 Bad Request", {"error": "bad body"})
            result = scorer.score(req)
            return _json_response(start_response, "200 OK", {
                "logprob": result.logprob,
                "token_count": result.token_count,
                "model_id": result.model_id,
            })

        def _json_response(start_response, status, payload):
            data = json.dumps(payload).encode("utf-8")
            start_response(status, [("Content-Type", "application/json"),
                                    ("Content-Length", str(len(data)))])
            return [data]

        class QuietServer(WSGIServer):
            def handle_error(self, request, client_address):
                pass

        self.server = make_server("127.0.0.1", 0, app, server_class=QuietServer)
        self.server.RequestHandlerClass.log_message = lambda *a: None

    def __enter__(self):
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return f"http://127.0.0.1:{self.server.server_port}"

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


class _ScriptedServer:
    """Replies with a fixed sequence of (status, payload) responses."""

    def __init__(self, script):
        shim = self
        self.attempts = 0

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                self.rfile.read(length)
                status, payload = script[min(shim.attempts, len(script) - 1)]
                shim.attempts += 1
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)

    def __enter__(self):
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        return f"http://127.0.0.1:{self.server.server_port}"

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


GOOD = {"logprob": -1.5, "token_count": 3, "model_id": "scripted"}


class TestHttpScorer:
    def test_empty_request_returns_protocol_zero(self):
        with _HttpServerShim(BigramScorer(REFERENCE_TRAINING)) as url:
            result = HttpScorer(url).score(ScoreRequest("", ""))
        assert result.logprob == 0.0 and result.token_count == 0

    def test_values_pass_through_verbatim(self):
        scorer = BigramScorer(REFERENCE_TRAINING)
        with _HttpServerShim(scorer) as url:
            via_http = HttpScorer(url).score(ScoreRequest("ctx", "continuation"))
        direct = scorer.score(ScoreRequest("ctx", "continuation"))
        assert via_http == direct

    def test_three_503s_exhaust_retries_as_transport_error(self):
        with _ScriptedServer([(503, {"error": "busy"})] * 5) as url:
            scorer = HttpScorer(url, retries=3, backoff=0.0)
            with pytest.raises(TransportError, match="3 attempts"):
                scorer.score(ScoreRequest("a", "b"))

    def test_transient_503_then_success_recovers(self):
        server = _ScriptedServer([(503, {"error": "busy"}), (200, GOOD)])
        with server as url:
            result = HttpScorer(url, retries=3, backoff=0.0).score(ScoreRequest("a", "b"))
        assert result.logprob == -1.5
        assert server.attempts == 2

    def test_client_error_is_protocol_error_without_retry(self):
        server = _ScriptedServer([(400, {"error": "nope"})])
        with server as url:
            with pytest.raises(ProtocolError, match="nope"):
                HttpScorer(url, retries=3, backoff=0.0).score(ScoreRequest("a", "b"))
        assert server.attempts == 1

    def test_missing_field_is_protocol_error(self):
        server = _ScriptedServer([(200, {"logprob": -1.0, "model_id": "m"})])
        with server as url:
            with pytest.raises(ProtocolError, match="token_count"):
                HttpScorer(url, backoff=0.0).score(ScoreRequest("a", "b"))

    def test_contract_violating_body_is_protocol_error(self):
        server = _ScriptedServer([(200, {"logprob": 2.0, "token_count": 1, "model_id": "m"})])
        with server as url:
            with pytest.raises(ProtocolError):
                HttpScorer(url, backoff=0.0).score(ScoreRequest("a", "b"))

    def test_unreachable_endpoint_is_transport_error(self):
        scorer = HttpScorer("http://127.0.0.1:1", retries=2, backoff=0.0, timeout=0.5)
        with pytest.raises(TransportError):
            scorer.score(ScoreRequest("a", "b"))

    def test_model_id_probes_endpoint_once(self):
        with _HttpServerShim(BigramScorer(REFERENCE_TRAINING)) as url:
            scorer = HttpScorer(url)
            assert scorer.model_id == BigramScorer(REFERENCE_TRAINING).model_id
            assert scorer.model_id == scorer.model_id


class TestConcurrentScoring:
    def test_parallel_congruity_over_http_matches_direct_mock(self, tmp_path):
        import numpy as np

        from kcforge import CachedScorer, congruity_matrix
        from tests.conftest import make_bank

        bank = make_bank(5)
        reference = BigramScorer(REFERENCE_TRAINING)
        expected = congruity_matrix(bank, reference)
        with _HttpServerShim(BigramScorer(REFERENCE_TRAINING)) as url:
            client = CachedScorer(HttpScorer(url), tmp_path / "cache.txt")
            via_http = congruity_matrix(bank, client, parallelism=4)
        assert via_http.values[0, 1] == expected.values[0, 1]
        assert np.allclose(
            np.nan_to_num(via_http.values), np.nan_to_num(expected.values), atol=0
        )


class TestShimConformance:
    def test_independent_shims_agree_within_tolerance(self):
        reference = BigramScorer(REFERENCE_TRAINING)
        with _HttpServerShim(BigramScorer(REFERENCE_TRAINING)) as url_a, \
                _WsgiShim(BigramScorer(REFERENCE_TRAINING)) as url_b:
            client_a = HttpScorer(url_a)
            client_b = HttpScorer(url_b)
            for context, continuation in CONFORMANCE_SUITE:
                req = ScoreRequest(context, continuation)
                ra = client_a.score(req)
                rb = client_b.score(req)
                assert ra.token_count == rb.token_count
                assert abs(ra.logprob - rb.logprob) <= 1e-6
                tokens = max(ra.token_count, 1)
                direct = reference.score(req)
                assert abs(ra.logprob - direct.logprob) / tokens <= 1e-6
                if continuation:
                    assert ra.logprob < 0.0 and ra.token_count >= 1
