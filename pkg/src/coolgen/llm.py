"""Chat-completion backends for reward sampling, plus token accounting.

Two backends share ``complete``: an HTTP client for any endpoint speaking the
chat-completions JSON schema, and a seeded offline sampler that draws reward
forms from a small template family. Token counts for the mock are
``ceil(chars / 4)``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

log = logging.getLogger(__name__)


class LlmError(RuntimeError):
    pass


class AuthConfigError(LlmError):
    """Credentials missing or rejected."""


class RetriesExhausted(LlmError):
    pass


class MalformedResponse(LlmError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    temperature: float = 0.7
    n: int = 5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        object.__setattr__(self, "messages", tuple(dict(m) for m in self.messages))

    def prompt_text(self) -> str:
        return "\n".join(m["content"] for m in self.messages)

    def payload(self) -> dict:
        return {"model": self.model, "messages": list(self.messages), "temperature": self.temperature, "n": self.n}


@dataclass(frozen=True)
class TokenUsage:
    requests: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(self.requests + other.requests, self.prompt_tokens + other.prompt_tokens,
                          self.completion_tokens + other.completion_tokens)

    def to_dict(self) -> dict:
        return {"requests": self.requests, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens, "total_tokens": self.total_tokens}


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint_url: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 4
    mock_seed: int | None = 0
    model: str = "gpt-4o"
    debug: bool = False

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not (self.endpoint_url and self.api_key_env):
            raise ValueError("http backend needs endpoint_url and api_key_env")
        if self.kind == "mock" and self.mock_seed is None:
            raise ValueError("mock backend needs mock_seed")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        if "api_key" in d:
            raise ValueError("api keys are read from the environment only; use api_key_env")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def count_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


class UsageSession:
    """Thread-safe accumulator of per-call token deltas, tagged by stage."""

    def __init__(self):
        self._lock = threading.Lock()
        self.calls: list[tuple[str, TokenUsage]] = []

    def add(self, stage: str, delta: TokenUsage) -> None:
        with self._lock:
            self.calls.append((stage, delta))

    @property
    def total(self) -> TokenUsage:
        with self._lock:
            out = TokenUsage()
            for _, d in self.calls:
                out = out + d
            return out


def usage_report(session: UsageSession) -> dict:
    by_stage: dict[str, TokenUsage] = {}
    for stage, d in list(session.calls):
        by_stage[stage] = by_stage.get(stage, TokenUsage()) + d
    return {
        "total": session.total.to_dict(),
        "by_stage": {k: v.to_dict() for k, v in sorted(by_stage.items())},
        "calls": [dict(stage=s, **d.to_dict()) for s, d in session.calls],
    }


# --- HTTP backend ------------------------------------------------------------------

_RETRY_STATUS = {429, 500, 502, 503, 504}


def _redact(headers: dict) -> dict:
    return {k: ("Bearer ***" if k.lower() == "authorization" else v) for k, v in headers.items()}


def _http_complete(cfg: BackendConfig, req: ChatRequest, transport: httpx.BaseTransport | None,
                   sleep: Callable[[float], None], rng: random.Random) -> tuple[list[str], TokenUsage]:
    key = os.environ.get(cfg.api_key_env)
    if not key:
        raise AuthConfigError(f"environment variable {cfg.api_key_env} is not set")
    url = cfg.endpoint_url.rstrip("/") + "/chat/completions"
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    body = req.payload()
    if cfg.debug:
        log.debug("POST %s headers=%s body=%s", url, _redact(headers), json.dumps(body))
    last_error = ""
    with httpx.Client(transport=transport, timeout=cfg.timeout_s) as client:
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                sleep(2.0 ** (attempt - 1) * (1.0 + 0.25 * rng.random()))
            try:
                resp = client.post(url, headers=headers, json=body)
            except httpx.TimeoutException as exc:
                last_error = f"timeout: {exc}"
                continue
            if resp.status_code in (401, 403):
                raise AuthConfigError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code in _RETRY_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if cfg.debug:
                log.debug("response %s", resp.text)
            return _parse_response(resp, req)
    raise RetriesExhausted(f"gave up after {cfg.max_retries + 1} attempts ({last_error})")


def _parse_response(resp: httpx.Response, req: ChatRequest) -> tuple[list[str], TokenUsage]:
    try:
        doc = resp.json()
        texts = [c["message"]["content"] for c in doc["choices"]]
        usage = doc.get("usage") or {}
        prompt = int(usage.get("prompt_tokens", 0))
        completion = int(usage.get("completion_tokens", 0))
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"unexpected response body: {exc}") from exc
    if len(texts) != req.n or not all(isinstance(t, str) for t in texts):
        raise MalformedResponse(f"expected {req.n} text choices, got {len(texts)}")
    return texts, TokenUsage(1, prompt, completion)


def complete(cfg: BackendConfig, req: ChatRequest, session: UsageSession | None = None, stage: str = "",
             transport: httpx.BaseTransport | None = None,
             sleep: Callable[[float], None] = time.sleep) -> tuple[list[str], TokenUsage]:
    """Sample ``req.n`` completions; returns the texts and this call's usage delta."""
    if cfg.kind == "http":
        seed = int.from_bytes(hashlib.sha256(req.prompt_text().encode()).digest()[:4], "little")
        texts, delta = _http_complete(cfg, req, transport, sleep, random.Random(seed))
    else:
        prompt = req.prompt_text()
        seed = (cfg.mock_seed, hashlib.sha256(prompt.encode()).hexdigest()[:16])
        texts = mock_generate(seed, prompt, req.n)
        delta = TokenUsage(1, count_tokens(prompt), sum(count_tokens(t) for t in texts))
    if session is not None:
        session.add(stage, delta)
    return texts, delta


# --- mock sampler --------------------------------------------------------------------

_WUE_RE = re.compile(r"\bWUE\b")
_VIOLATION_RE = re.compile(r"worst_case_violation\s*[=:]\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)")


@dataclass
class TemplateParams:
    """One draw from the mock template family."""

    shape: str  # "listing" (Listing-style temperature/power skeleton) or "ratio"
    sla_weight: float
    temp_scale: float
    band_weight: float
    power_weight: float
    rh_weight: float = 0.0
    water_weight: float = 0.0
    clip: bool = False
    track: bool = True


def reflection_pressure(context: str) -> float:
    """How strongly reported boundary violations should push the SLA weights up."""
    vals = [float(m) for m in _VIOLATION_RE.findall(context)]
    return min(2.0, max(vals)) if vals else 0.0


LISTING_PARAMS = TemplateParams("listing", 1.0, 5.0, 0.0, 1.0, clip=True)


def sample_params(rng: random.Random, context: str, first: bool) -> TemplateParams:
    """``first`` draws reproduce the Listing-style form exactly (weights included)."""
    if first:
        return dataclasses.replace(
            LISTING_PARAMS,
            rh_weight=0.05 if "zone_relative_humidity" in context else 0.0,
            water_weight=0.1 if _WUE_RE.search(context) else 0.0,
        )
    pressure = reflection_pressure(context)
    shift = 1.5 * pressure
    sla = rng.uniform(0.5, 1.5) + shift
    shape = rng.choice(("listing", "ratio", "ratio"))
    track = rng.random() >= max(0.0, 0.2 - 0.2 * pressure)
    return TemplateParams(
        shape=shape,
        sla_weight=round(sla, 3),
        temp_scale=round(rng.choice((1.0, 2.0, 3.0, 5.0)), 1),
        band_weight=round(rng.uniform(0.0, 2.0) + shift, 3),
        power_weight=round(rng.choice([0.1 * k for k in range(1, 11)]), 1),
        rh_weight=round(rng.uniform(0.02, 0.1), 3) if "zone_relative_humidity" in context else 0.0,
        water_weight=round(rng.uniform(0.05, 0.3), 3) if _WUE_RE.search(context) else 0.0,
        clip=rng.random() < 0.5,
        track=track,
    )


def render(p: TemplateParams) -> str:
    t = 'obs("zone_air_temperature")'
    lines = [f"let temperature = {t} in"]
    terms = []
    if p.track:
        lines.append('let temperature_difference = abs(temperature - sla("t_target")) in')
        terms.append(f"{p.sla_weight} * (1.0 - temperature_difference / {p.temp_scale})")
        if p.band_weight > 0:
            lines.append('let excess = max(temperature - sla("t_high"), 0.0) + max(sla("t_low") - temperature, 0.0) in')
            terms.append(f"- {p.band_weight} * excess")
    if p.shape == "listing":
        lines.append('let total_power = obs("IT_power") + obs("Chiller_power") + obs("CRAC_power") + obs("CHWP_power") in')
        terms.append(f"- total_power * {p.power_weight / 2:g} / 100000.0")
    else:
        lines.append('let overhead = (obs("CRAC_power") + obs("Chiller_power") + obs("CHWP_power")) / obs("IT_power") in')
        terms.append(f"- {p.power_weight} * overhead")
    if p.rh_weight:
        terms.append(f'- {p.rh_weight} * max(obs("zone_relative_humidity") - sla("rh_high"), 0.0)')
    if p.water_weight:
        terms.append(f'- {p.water_weight} * obs("water_usage") / obs("IT_power")')
    body = " ".join(terms) if terms else "0.0"
    if body.startswith("- "):
        body = "-" + body[2:]
    body = f"clip({body}, -1.0, 1.0)" if p.clip else body
    return "\n".join(lines + [body])


def mock_generate(seed, context: str, n: int) -> list[str]:
    """``n`` fenced DSL candidates; deterministic in ``(seed, context, n)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    digest = hashlib.sha256(repr((seed, context, n)).encode()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "little"))
    out = []
    for i in range(n):
        p = sample_params(rng, context, first=(i == 0 and reflection_pressure(context) == 0.0))
        out.append(f"Candidate {i + 1}:\n```\n{render(p)}\n```\n")
    return out


_FENCE_RE = re.compile(r"```[a-zA-Z]*\n(.*?)```", re.S)


def extract_candidate(text: str) -> str:
    """The first fenced block of a completion, or the whole text when unfenced."""
    m = _FENCE_RE.search(text)
    return (m.group(1) if m else text).strip()


def sla_weight_of(source: str) -> float:
    """Leading SLA weight of a rendered mock candidate (0 when the form has no tracking term)."""
    m = re.search(r"([0-9.]+) \* \(1\.0 - temperature_difference", source)
    return float(m.group(1)) if m else 0.0


def messages(system: str, user: str) -> Sequence[dict]:
    return ({"role": "system", "content": system}, {"role": "user", "content": user})
