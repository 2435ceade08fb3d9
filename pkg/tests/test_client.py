import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from multirag.client import ENV_ENDPOINT, HttpClient, MockClient, prompt_hash
from multirag.errors import ClientError


def test_exact_hash_beats_rules():
    client = MockClient({"replies": {prompt_hash("hello"): "exact"},
                         "rules": [{"contains": "hello", "reply": "rule"}]})
    assert client.complete("ner", "hello") == "exact"
    assert client.complete("ner", "HELLO there") == "rule"


def test_rule_kind_contains_and_matches():
    client = MockClient({"rules": [
        {"kind": "authority", "contains": ["source: a"], "matches": r"^candidate fact: .*\| year \| \D", "reply": "-3"},
        {"kind": "authority", "contains": "source: a", "reply": "2"},
    ], "defaults": {"authority": "0"}})
    assert client.complete("authority", "candidate fact: X | year | MCMXX\ncandidate source: a") == "-3"
    assert client.complete("authority", "candidate fact: X | year | 1920\ncandidate source: A") == "2"
    assert client.complete("authority", "candidate source: b") == "0"
    assert client.calls["authority"] == 3 and client.total_calls == 3


def test_answer_fallback_extracts_trusted_values():
    client = MockClient({})
    ctx = "trusted evidence:\n+ CA981 status = Delayed [src: airline; C=0.9]\n+ CA981 status = Delayed [src: x]\n"
    assert client.complete("answer", ctx) == "Delayed"
    assert client.complete("answer", "trusted evidence:\n(no trusted evidence)\n").startswith("Insufficient")


def test_missing_reply_is_client_error():
    with pytest.raises(ClientError):
        MockClient({}).complete("ner", "anything")


def test_rule_can_raise():
    client = MockClient({"rules": [{"contains": "x", "error": "down"}]})
    with pytest.raises(ClientError, match="down"):
        client.complete("ner", "x")


def test_budget_enforced_and_reset():
    client = MockClient({"defaults": {"ner": "[]"}}, budget=2)
    client.complete("ner", "a")
    client.complete("ner", "b")
    with pytest.raises(ClientError):
        client.complete("ner", "c")
    client.reset_counters()
    assert client.complete("ner", "d") == "[]"


def test_from_path_directory(tmp_path):
    (tmp_path / "mock.json").write_text(json.dumps({"defaults": {"std": "{}"}}))
    assert MockClient.from_path(tmp_path).complete("std", "x") == "{}"


# ---------------------------------------------------------------- live transport

class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((self.path, dict(self.headers), body))
        prompt = body["messages"][0]["content"]
        if prompt == "shape":
            payload = {"nope": True}
        else:
            payload = {"choices": [{"message": {"content": f"echo:{prompt}"}}]}
        data = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    _Handler.seen.clear()
    yield f"http://127.0.0.1:{httpd.server_port}/v1/chat/completions"
    httpd.shutdown()


def test_http_round_trip(server):
    client = HttpClient(server, model="m1", api_key="k")
    assert client.complete("answer", "hi") == "echo:hi"
    path, headers, body = _Handler.seen[0]
    assert path == "/v1/chat/completions"
    assert body["temperature"] == 0 and body["model"] == "m1"
    assert body["metadata"] == {"kind": "answer"}
    assert headers["Authorization"] == "Bearer k"
    assert client.latency_s > 0


def test_http_bad_shape(server):
    with pytest.raises(ClientError, match="shape"):
        HttpClient(server).complete("answer", "shape")


def test_http_unreachable():
    with pytest.raises(ClientError):
        HttpClient("http://127.0.0.1:9/", timeout=2).complete("answer", "x")


def test_http_endpoint_from_environment(monkeypatch, server):
    monkeypatch.setenv(ENV_ENDPOINT, server)
    assert HttpClient().complete("ner", "e") == "echo:e"
    monkeypatch.delenv(ENV_ENDPOINT)
    with pytest.raises(ClientError):
        HttpClient()
