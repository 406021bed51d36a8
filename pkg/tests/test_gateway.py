from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from mimg.corpus import estimate_tokens
from mimg.gateway import (
    ChatRequest,
    EmbeddingVector,
    Gateway,
    HttpChatBackend,
    NonRetryableError,
    ProtocolError,
    RetryExhaustedError,
    UsageLedger,
    backoff_delays,
    usage_report,
)
from mimg.mockllm import (
    BehaviorRule,
    BehaviorTable,
    MockEmbeddingBackend,
    default_behavior_table,
    mock_generate,
)
from mimg.prompts import question_extraction_prompt
from mimg.verification import parse_verdict


@pytest.fixture
def fake_server():
    """HTTP server answering from a scripted (status, body) queue."""

    script: list[tuple[int, dict]] = []
    hits: list[str] = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            hits.append(self.path)
            length = int(self.headers.get("Content-Length", 0))
            self.rfile.read(length)
            status, body = script.pop(0) if script else (500, {"error": "script empty"})
            payload = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", script, hits
    finally:
        server.shutdown()
        thread.join(timeout=5)


def chat_body(text="hello", usage=True):
    body = {"choices": [{"message": {"role": "assistant", "content": text}}]}
    if usage:
        body["usage"] = {"prompt_tokens": 7, "completion_tokens": 3}
    return body


class TestHttpChat:
    def test_success_with_usage(self, fake_server):
        base, script, _ = fake_server
        script.append((200, chat_body("hi there")))
        gw = Gateway(HttpChatBackend(base, "m"), backoff_base=0.0)
        resp = gw.chat(ChatRequest.user("ping", request_tag="t"))
        assert resp.text == "hi there"
        assert (resp.input_tokens, resp.output_tokens) == (7, 3)

    def test_429_twice_then_200_succeeds_in_three_attempts(self, fake_server):
        base, script, hits = fake_server
        script.extend([(429, {"error": "rate"}), (429, {"error": "rate"}), (200, chat_body())])
        gw = Gateway(HttpChatBackend(base, "m"), max_retries=3, backoff_base=0.0)
        resp = gw.chat(ChatRequest.user("ping"))
        assert resp.text == "hello"
        assert len(hits) == 3

    def test_401_is_non_retryable_single_attempt(self, fake_server):
        base, script, hits = fake_server
        script.append((401, {"error": "no key"}))
        gw = Gateway(HttpChatBackend(base, "m"), backoff_base=0.0)
        with pytest.raises(NonRetryableError) as err:
            gw.chat(ChatRequest.user("ping"))
        assert err.value.status == 401
        assert len(hits) == 1

    def test_retries_exhausted(self, fake_server):
        base, script, hits = fake_server
        script.extend([(503, {})] * 10)
        gw = Gateway(HttpChatBackend(base, "m"), max_retries=3, backoff_base=0.0)
        with pytest.raises(RetryExhaustedError):
            gw.chat(ChatRequest.user("ping"))
        assert len(hits) == 4  # 1 attempt + 3 retries

    def test_missing_usage_falls_back_to_estimates(self, fake_server):
        base, script, _ = fake_server
        script.append((200, chat_body("four char units", usage=False)))
        gw = Gateway(HttpChatBackend(base, "m"), backoff_base=0.0)
        resp = gw.chat(ChatRequest.user("abcd" * 5))
        assert resp.input_tokens == estimate_tokens("abcd" * 5)
        assert resp.output_tokens == estimate_tokens("four char units")

    def test_embeddings_endpoint(self, fake_server):
        base, script, hits = fake_server
        script.append(
            (200, {"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [0.0, 1.0]}]})
        )
        from mimg.gateway import HttpEmbeddingBackend

        gw = Gateway(
            HttpChatBackend(base, "m"),
            HttpEmbeddingBackend(base, "e", dimension=2),
            backoff_base=0.0,
        )
        vecs = gw.embed(["a", "b"])
        assert [v.values for v in vecs] == [(1.0, 0.0), (0.0, 1.0)]
        assert hits == ["/v1/embeddings"]

    def test_embedding_dimension_mismatch_is_protocol_error(self, fake_server):
        base, script, _ = fake_server
        script.append((200, {"data": [{"index": 0, "embedding": [1.0, 0.0, 0.0]}]}))
        from mimg.gateway import HttpEmbeddingBackend

        gw = Gateway(
            HttpChatBackend(base, "m"),
            HttpEmbeddingBackend(base, "e", dimension=2),
            backoff_base=0.0,
        )
        with pytest.raises(ProtocolError):
            gw.embed(["a"])


def test_api_key_read_from_environment(fake_server, monkeypatch):
    base, script, _ = fake_server
    seen = {}
    monkeypatch.setenv("MIMG_API_KEY", "sk-test-123")
    script.append((200, chat_body()))
    backend = HttpChatBackend(base, "m")
    session_post = backend.session.post

    def post_and_capture(url, **kwargs):
        seen.update(kwargs["headers"])
        return session_post(url, **kwargs)

    backend.session.post = post_and_capture
    Gateway(backend, backoff_base=0.0).chat(ChatRequest.user("ping"))
    assert seen.get("Authorization") == "Bearer sk-test-123"


class TestMockBackend:
    def test_same_prompt_same_seed_byte_identical(self):
        table = default_behavior_table()
        prompt = question_extraction_prompt("Some document body here.", "en")
        assert mock_generate(prompt, table, 1) == mock_generate(prompt, table, 1)

    def test_question_extraction_prompt_yields_parseable_list(self, mock_gateway):
        gw = mock_gateway(seed=1)
        prompt = question_extraction_prompt("The treaty of the harbor council was signed.", "en")
        text = gw.chat(ChatRequest.user(prompt)).text
        parsed = json.loads(text)
        assert isinstance(parsed, list)
        assert 0 < len(parsed) <= 3

    def test_verification_prompt_yields_verdict_json(self, mock_gateway):
        from mimg.verification import VerificationConditions, VerificationSample, build_verification_prompt

        gw = mock_gateway(seed=1)
        prompt = build_verification_prompt(
            VerificationSample("s1", "Q?", "A.", "context doc"), VerificationConditions()
        )
        raw = gw.chat(ChatRequest.user(prompt)).text
        _, _, quality, _ = parse_verdict(raw)
        assert 0 <= quality <= 10

    def test_distinct_documents_distinct_questions(self):
        table = default_behavior_table()
        rng_texts = [f"Document number {i} about topic-{i} with year {1500 + i}." for i in range(100)]
        outputs = {
            mock_generate(question_extraction_prompt(t, "en"), table, 0) for t in rng_texts
        }
        assert len(outputs) == 100

    def test_behavior_table_declaration_order(self):
        table = BehaviorTable(
            rules=(
                BehaviorRule(pattern="alpha", template="first {digest}"),
                BehaviorRule(pattern="alpha beta", template="second"),
            ),
            default=BehaviorRule(pattern="", template="fallback"),
        )
        assert mock_generate("alpha beta", table, 0).startswith("first")
        assert mock_generate("nothing", table, 0) == "fallback"

    def test_behavior_table_requires_default(self):
        with pytest.raises(ValueError, match="default"):
            BehaviorTable.from_dict({"rules": []})

    def test_behavior_table_from_file(self, tmp_path):
        path = tmp_path / "table.json"
        path.write_text(
            json.dumps(
                {
                    "rules": [{"pattern": "ping", "template": "pong {digest}"}],
                    "default": {"builtin": "echo"},
                }
            )
        )
        table = BehaviorTable.from_file(path)
        assert mock_generate("ping", table, 0).startswith("pong ")

    def test_mock_embeddings_deterministic_and_sized(self):
        backend = MockEmbeddingBackend(seed=0, dimension=768)
        a, b = backend.embed_texts(["same text", "same text"])
        assert a == b
        assert len(a.values) == 768

    def test_gateway_embed_checks_count_and_dim(self, mock_gateway):
        gw = mock_gateway(dimension=768)
        vecs = gw.embed(["x", "y", "z"])
        assert len(vecs) == 3
        assert all(len(v.values) == 768 for v in vecs)

    def test_empty_embed_input_rejected(self, mock_gateway):
        with pytest.raises(ValueError):
            mock_gateway().embed([])


class TestLedger:
    def test_empty_ledger_all_zero(self):
        report = usage_report(UsageLedger())
        assert report["totals"] == {"calls": 0, "input_tokens": 0, "output_tokens": 0}

    def test_two_calls_same_tag(self):
        ledger = UsageLedger()
        ledger.record("sqga", 100, 10)
        ledger.record("sqga", 100, 10)
        report = usage_report(ledger)
        assert report["tags"]["sqga"] == {"calls": 2, "input_tokens": 200, "output_tokens": 20}

    def test_mixed_tags_match_brute_force_sum(self):
        calls = [("a", 10, 1), ("b", 20, 2), ("a", 30, 3), ("c", 5, 0), ("b", 7, 7)]
        ledger = UsageLedger()
        for tag, i, o in calls:
            ledger.record(tag, i, o)
        report = usage_report(ledger)
        assert report["totals"]["input_tokens"] == sum(i for _, i, _ in calls)
        assert report["totals"]["output_tokens"] == sum(o for _, _, o in calls)
        assert report["totals"]["calls"] == len(calls)

    def test_report_ordering_deterministic(self):
        ledger = UsageLedger()
        for tag in ("zeta", "alpha", "mid"):
            ledger.record(tag, 1, 1)
        assert list(usage_report(ledger)["tags"]) == ["alpha", "mid", "zeta"]

    def test_totals_non_decreasing(self):
        ledger = UsageLedger()
        previous = 0
        for i in range(10):
            ledger.record("t", i, 0)
            current = ledger.totals()["input_tokens"]
            assert current >= previous
            previous = current


def test_backoff_monotone_non_decreasing():
    delays = backoff_delays(5, 1.0)
    assert delays == sorted(delays)
    assert delays[0] == 1.0


def test_chat_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(messages=())
    with pytest.raises(ValueError):
        ChatRequest(messages=(("robot", "hi"),))


def test_embedding_vector_norm_invariant():
    vec = EmbeddingVector.from_values([3.0, 4.0])
    assert abs(vec.norm - 5.0) <= 1e-6
    with pytest.raises(ValueError):
        EmbeddingVector(values=(3.0, 4.0), norm=6.0)


def test_mock_chat_usage_recorded_under_tag(mock_gateway):
    gw = mock_gateway()
    gw.chat(ChatRequest.user("hello", request_tag="stage.x"))
    snap = gw.ledger.snapshot()
    assert snap["stage.x"]["calls"] == 1
    assert snap["stage.x"]["input_tokens"] > 0
