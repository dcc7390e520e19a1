from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from coolgen import dsl, llm
from coolgen.family import family_layout, reward_obs_schema, reward_sla_schema

REQ = llm.ChatRequest("gpt-4o", llm.messages("system text", "design a reward"), n=2)


def http_cfg(**kw):
    base = dict(kind="http", endpoint_url="https://llm.invalid/v1", api_key_env="COOLGEN_TEST_KEY", max_retries=3)
    base.update(kw)
    return llm.BackendConfig(**base)


def ok_body(n=2):
    return {"choices": [{"message": {"content": f"```\n{i}.0\n```"}} for i in range(n)],
            "usage": {"prompt_tokens": 120, "completion_tokens": 30}}


def scripted(responses, seen):
    it = iter(responses)

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        status, body = next(it)
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler)


# --- HTTP backend ------------------------------------------------------------------------------

def test_missing_key_fails_before_network(monkeypatch):
    monkeypatch.delenv("COOLGEN_TEST_KEY", raising=False)
    seen = []
    with pytest.raises(llm.AuthConfigError, match="COOLGEN_TEST_KEY"):
        llm.complete(http_cfg(), REQ, transport=scripted([], seen))
    assert seen == []


def test_retries_with_backoff(monkeypatch):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-test")
    seen, sleeps = [], []
    transport = scripted([(503, {}), (429, {}), (200, ok_body())], seen)
    session = llm.UsageSession()
    texts, delta = llm.complete(http_cfg(), REQ, session, "Initialize rewards", transport, sleeps.append)
    assert len(seen) == 3
    assert 1.0 <= sleeps[0] <= 1.25 and 2.0 <= sleeps[1] <= 2.5
    assert [llm.extract_candidate(t) for t in texts] == ["0.0", "1.0"]
    assert delta == llm.TokenUsage(1, 120, 30)
    assert session.calls == [("Initialize rewards", delta)]
    sent = json.loads(seen[0].content)
    assert sent["n"] == 2 and sent["model"] == "gpt-4o"
    assert seen[0].headers["authorization"] == "Bearer sk-test"
    assert str(seen[0].url) == "https://llm.invalid/v1/chat/completions"


def test_retries_exhausted(monkeypatch):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-test")
    seen, sleeps = [], []
    with pytest.raises(llm.RetriesExhausted, match="4 attempts"):
        llm.complete(http_cfg(), REQ, transport=scripted([(500, {})] * 4, seen), sleep=sleeps.append)
    assert len(seen) == 4 and len(sleeps) == 3


def test_unauthorized_is_not_retried(monkeypatch):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-test")
    seen = []
    with pytest.raises(llm.AuthConfigError, match="401"):
        llm.complete(http_cfg(), REQ, transport=scripted([(401, {}), (200, ok_body())], seen), sleep=lambda s: None)
    assert len(seen) == 1


@pytest.mark.parametrize("body", [{"nope": 1}, {"choices": [{"message": {}}]}, ok_body(1), "not json"])
def test_malformed_body(monkeypatch, body):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-test")
    with pytest.raises(llm.MalformedResponse):
        llm.complete(http_cfg(), REQ, transport=scripted([(200, body)], []))


def test_timeout_counts_as_retry(monkeypatch):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-test")
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return httpx.Response(200, json=ok_body())

    texts, _ = llm.complete(http_cfg(), REQ, transport=httpx.MockTransport(handler), sleep=lambda s: None)
    assert len(texts) == 2 and len(calls) == 2


def test_config_rejects_inline_key():
    with pytest.raises(ValueError, match="environment"):
        llm.BackendConfig.from_dict({"kind": "http", "endpoint_url": "x", "api_key": "sk-oops"})
    with pytest.raises(ValueError):
        llm.BackendConfig(kind="http")
    with pytest.raises(ValueError):
        llm.BackendConfig(kind="carrier-pigeon")


def test_debug_log_redacts_key(monkeypatch, caplog):
    monkeypatch.setenv("COOLGEN_TEST_KEY", "sk-secret")
    with caplog.at_level("DEBUG", logger="coolgen.llm"):
        llm.complete(http_cfg(debug=True), REQ, transport=scripted([(200, ok_body())], []))
    assert "sk-secret" not in caplog.text and "Bearer ***" in caplog.text


# --- mock backend ----------------------------------------------------------------------------------

def test_mock_is_deterministic():
    cfg = llm.BackendConfig(mock_seed=7)
    a, da = llm.complete(cfg, REQ)
    b, db = llm.complete(cfg, REQ)
    c, _ = llm.complete(llm.BackendConfig(mock_seed=8), llm.ChatRequest("m", REQ.messages, n=5))
    assert a == b and da == db
    assert len(c) == 5


def test_mock_usage_counts_characters():
    texts, delta = llm.complete(llm.BackendConfig(), REQ)
    assert delta.prompt_tokens == llm.count_tokens(REQ.prompt_text())
    assert delta.completion_tokens == sum(llm.count_tokens(t) for t in texts)
    assert llm.count_tokens("abcde") == 2 and llm.count_tokens("") == 0


def test_mock_candidates_parse_across_seeds():
    layout = family_layout("c")
    context = "observations: zone_relative_humidity ... report WUE"
    for seed in range(1000):
        for text in llm.mock_generate(seed, context, 2):
            form = dsl.parse(llm.extract_candidate(text))
            issues = dsl.validate(form, reward_obs_schema(layout), reward_sla_schema(layout))
            assert [i for i in issues if i.code in ("unknown-obs", "unknown-sla")] == []


def test_first_candidate_is_listing_shaped(listing_reward):
    src = llm.extract_candidate(llm.mock_generate(0, "family a task", 3)[0])
    assert src == llm.render(llm.LISTING_PARAMS)
    form = dsl.parse(src)
    rng = np.random.default_rng(0)
    for _ in range(200):
        obs = {"zone_air_temperature": rng.uniform(15, 35), "IT_power": rng.uniform(0, 2e5),
               "Chiller_power": rng.uniform(0, 5e4), "CRAC_power": rng.uniform(0, 3e4),
               "CHWP_power": rng.uniform(0, 1e4)}
        psi = {"t_target": 23.0, "t_low": 18.0, "t_high": 25.0}
        assert dsl.evaluate(form, obs, psi) == pytest.approx(dsl.evaluate(listing_reward, obs, psi), abs=1e-12)


def test_single_candidate_request():
    texts = llm.mock_generate(3, "ctx", 1)
    assert len(texts) == 1
    with pytest.raises(ValueError):
        llm.mock_generate(3, "ctx", 0)


def test_reflection_raises_sla_weight():
    calm = [llm.sla_weight_of(llm.extract_candidate(t)) for s in range(40) for t in llm.mock_generate(s, "ctx", 5)[1:]]
    hot = [llm.sla_weight_of(llm.extract_candidate(t))
           for s in range(40) for t in llm.mock_generate(s, "ctx worst_case_violation=1.2", 5)]
    assert np.mean(hot) > np.mean(calm) + 1.0
    assert llm.reflection_pressure("worst_case_violation: 5") == 2.0
    assert llm.reflection_pressure("nothing") == 0.0


def test_extract_candidate():
    assert llm.extract_candidate("intro\n```dsl\n1 + 2\n```\nbye") == "1 + 2"
    assert llm.extract_candidate("  3.0 ") == "3.0"


# --- usage accounting ------------------------------------------------------------------------------

def test_usage_totals():
    s = llm.UsageSession()
    s.add("Initialize rewards", llm.TokenUsage(1, 12005, 0))
    s.add("Sample new rewards", llm.TokenUsage(1, 0, 3417))
    assert s.total.total_tokens == 15422
    rep = llm.usage_report(s)
    assert rep["total"] == {"requests": 2, "prompt_tokens": 12005, "completion_tokens": 3417, "total_tokens": 15422}
    assert sum(c["total_tokens"] for c in rep["calls"]) == rep["total"]["total_tokens"]
    assert list(rep["by_stage"]) == ["Initialize rewards", "Sample new rewards"]


def test_empty_session_report():
    rep = llm.usage_report(llm.UsageSession())
    assert rep["total"]["total_tokens"] == 0 and rep["calls"] == [] and rep["by_stage"] == {}


def test_request_validation():
    with pytest.raises(ValueError):
        llm.ChatRequest("m", (), n=0)
    with pytest.raises(ValueError):
        llm.ChatRequest("m", (), temperature=-1)
