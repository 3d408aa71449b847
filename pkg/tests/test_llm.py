from __future__ import annotations

import json
import threading
import time

import httpx
import pytest
from hypothesis import given, strategies as st

from algoforge.errors import LiveCallRefused, MissingBinding, ProviderError, ScriptExhausted, UnknownPlaceholder
from algoforge.llm import (
    Gateway,
    OpenAIBackend,
    PromptTemplate,
    ReplayBackend,
    ReplayScript,
    format_replay_key,
    load_template,
    parse_replay_key,
    render_template,
)

from conftest import GOLDEN, golden_text

SHIPPED = ["agent0", "agent1", "agent2", "agent3_reasoning", "agent3_replanning", "agent4_implementing",
           "agent4_revising", "agent5", "direct_ask", "brute_force"]


# --- templates -----------------------------------------------------------------


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_templates_parse(name):
    t = load_template(name)
    assert t.system or t.user
    assert t.placeholders


def test_agent1_renders_statement_verbatim():
    t = load_template("agent1")
    assert t.placeholders == {"STATEMENT", "TAG_FILE"}
    statement = "Find {x} and {{y}} here."
    system, user = render_template(t, {"STATEMENT": statement, "TAG_FILE": "tags.txt"})
    assert statement in user
    assert "tags.txt" in system + user
    assert "{{STATEMENT}}" not in user


def test_both_placeholder_forms():
    t = PromptTemplate.create("t", "sys {{A}}", "user {b}")
    assert render_template(t, {"A": "1", "b": "2"}) == ("sys 1", "user 2")


def test_placeholder_free_identity():
    t = PromptTemplate.create("t", "plain system", "plain user")
    assert render_template(t, {}) == ("plain system", "plain user")


def test_missing_and_unknown_bindings():
    t = load_template("agent1")
    with pytest.raises(MissingBinding) as info:
        render_template(t, {"TAG_FILE": "x"})
    assert info.value.names == ["STATEMENT"] or set(info.value.names) == {"STATEMENT"}
    with pytest.raises(UnknownPlaceholder):
        render_template(t, {"STATEMENT": "s", "TAG_FILE": "x", "EXTRA": "y"})
    with pytest.raises(UnknownPlaceholder):
        PromptTemplate.create("t", "{{A}}", "{B}", placeholders={"A"})


safe = st.text(st.characters(blacklist_characters="{}", blacklist_categories=("Cs",)), max_size=20)


@given(prefix=safe, middle=safe, suffix=safe, value=st.text(max_size=20))
def test_rendering_preserves_literal_regions(prefix, middle, suffix, value):
    t = PromptTemplate.create("t", prefix + "{{X}}" + middle, suffix + "{y}")
    system, user = render_template(t, {"X": value, "y": value})
    assert system == prefix + value + middle
    assert user == suffix + value


# --- replay ----------------------------------------------------------------------


def test_golden_manifest_keys(golden_script):
    keys = sorted(format_replay_key(k) for k in golden_script.entries)
    assert keys == sorted(["Agent1-0", "Agent2-0", "Agent3-1", "Agent4-1", "Agent5-1", "Agent4-2", "Agent5-2"])
    assert golden_script.response("Agent1", 0, 1) == golden_text("Agent1-raw.txt")


def test_replay_returns_text_verbatim(golden_gateway):
    session = golden_gateway.session("appendix-i")
    assert session.complete(("s", "u"), "Agent1", 0) == golden_text("Agent1-raw.txt")
    [ex] = session.exchanges
    assert (ex.agent, ex.iteration, ex.occurrence, ex.response, ex.latency) == (
        "Agent1", 0, 1, golden_text("Agent1-raw.txt"), 0.0)


def test_empty_script_is_exhausted():
    session = Gateway(ReplayBackend(ReplayScript()), offline=True).session()
    with pytest.raises(ScriptExhausted):
        session.complete(("s", "u"), "Agent1", 0)


def test_occurrences_advance_per_key():
    script = ReplayScript()
    script.add("Agent4", 1, "first")
    script.add("Agent4", 1, "second")
    session = Gateway(ReplayBackend(script)).session()
    assert [session.complete(("", ""), "Agent4", 1) for _ in range(2)] == ["first", "second"]
    with pytest.raises(ScriptExhausted):
        session.complete(("", ""), "Agent4", 1)


def test_replay_twice_is_identical(golden_script):
    def run():
        session = Gateway(ReplayBackend(golden_script)).session()
        for agent, iteration, _ in golden_script.entries:
            session.complete((agent, str(iteration)), agent, iteration)
        return [e.to_dict() for e in session.exchanges]

    assert json.dumps(run()) == json.dumps(run())


def test_script_directory_round_trip(tmp_path, golden_script):
    golden_script.dump(tmp_path)
    again = ReplayScript.load(tmp_path)
    assert again.entries == golden_script.entries


def test_manifest_lists_mean_consecutive_occurrences(tmp_path):
    (tmp_path / "a.txt").write_text("A")
    (tmp_path / "b.txt").write_text("B")
    (tmp_path / "m.json").write_text(json.dumps({"Agent1-0": ["a.txt", "b.txt"]}))
    script = ReplayScript.load(tmp_path / "m.json")
    assert script.response("Agent1", 0, 1) == "A" and script.response("Agent1", 0, 2) == "B"


@pytest.mark.parametrize("text, key", [
    ("Agent1-0", ("Agent1", 0, 1)), ("Agent4-2-3.txt", ("Agent4", 2, 3)), ("Agent5-1.txt", ("Agent5", 1, 1)),
])
def test_replay_key_grammar(text, key):
    assert parse_replay_key(text) == key
    assert parse_replay_key(format_replay_key(key)) == key


def test_bad_replay_key():
    with pytest.raises(ValueError):
        parse_replay_key("agent-one")


def test_per_problem_scripts():
    a, b = ReplayScript(), ReplayScript()
    a.add("Agent1", 0, "for a")
    b.add("Agent1", 0, "for b")
    gw = Gateway(ReplayBackend({"a": a, "b": b}))
    assert gw.session("b").complete(("", ""), "Agent1", 0) == "for b"
    with pytest.raises(ScriptExhausted):
        gw.session("c").complete(("", ""), "Agent1", 0)


# --- live backend ------------------------------------------------------------------


def completion(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def backend(handler, **kw):
    kw.setdefault("sleep", lambda s: None)
    return OpenAIBackend("http://llm.test/v1", "m", "key-1", transport=httpx.MockTransport(handler), **kw)


def test_request_shape():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return completion("hello")

    b = backend(handler)
    assert b.complete("S", "U", agent="Agent1", iteration=0, occurrence=1) == "hello"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer key-1"
    assert seen["body"]["messages"] == [{"role": "system", "content": "S"}, {"role": "user", "content": "U"}]
    assert seen["body"]["temperature"] == 0


def test_retries_with_backoff():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("down")
        if len(calls) < 4:
            return httpx.Response(503)
        return completion("ok")

    b = backend(handler, sleep=sleeps.append)
    assert b.complete("", "", agent="Agent3", iteration=1, occurrence=1) == "ok"
    assert sleeps == [1.0, 2.0, 4.0]


def test_gives_up_after_retries():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(429)

    with pytest.raises(ProviderError):
        backend(handler).complete("", "", agent="Agent3", iteration=1, occurrence=1)
    assert len(calls) == 4


@pytest.mark.parametrize("response", [
    httpx.Response(401, text="bad key"),
    httpx.Response(200, json={"nope": 1}),
    httpx.Response(200, text="not json"),
])
def test_non_transient_failures(response):
    calls = []

    def handler(request):
        calls.append(1)
        return response

    with pytest.raises(ProviderError):
        backend(handler).complete("", "", agent="Agent1", iteration=0, occurrence=1)
    assert len(calls) == 1


def test_concurrency_cap():
    active, peak = [0], [0]
    lock = threading.Lock()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.02)
        with lock:
            active[0] -= 1
        return completion("x")

    b = backend(handler, max_concurrency=3)
    threads = [threading.Thread(target=b.complete, args=("", ""),
                                kwargs=dict(agent="A", iteration=0, occurrence=1)) for _ in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert 1 <= peak[0] <= 3


def test_env_configuration():
    with pytest.raises(ProviderError):
        OpenAIBackend.from_env({})
    b = OpenAIBackend.from_env({"ALGOFORGE_API_BASE": "http://x/v1/", "ALGOFORGE_MODEL": "m"})
    assert b.url == "http://x/v1/chat/completions"


def test_offline_gateway_refuses_live_backend():
    def handler(request):
        raise AssertionError("network touched")

    gw = Gateway(backend(handler), offline=True)
    with pytest.raises(LiveCallRefused):
        gw.session().complete(("", ""), "Agent1", 0)


def test_live_exchange_is_recorded():
    gw = Gateway(backend(lambda r: completion("resp")))
    s = gw.session("p")
    s.complete(("sys", "usr"), "Agent2", 0)
    [ex] = s.exchanges
    assert ex.request == ("sys", "usr") and ex.provider == "openai" and ex.latency >= 0


def test_manifest_files_resolve_relative_to_manifest():
    script = ReplayScript.load(GOLDEN / "replay.json")
    assert script.response("Agent4", 2, 1) == golden_text("Agent4-revise-raw-1.txt")
