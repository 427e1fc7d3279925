"""Chat-completion access, answer parsing, yes-probability extraction and caching.

Backends take an OpenAI-style request payload and return the response body as
a dict. ``Gateway`` adds retries and the on-disk response cache on top.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np

from .prompts import PromptTemplate, render_prompt

logger = logging.getLogger(__name__)

ANSWERS = ("Yes", "No")
FAILED_P_YES = 0.5
FAILED_ANSWER = "No"
STRATEGIES = ("logprob", "hard", "vote-k")


class TransportError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class AnswerParseError(ValueError):
    pass


class LogprobUnavailable(ValueError):
    pass


@dataclass
class BackendConfig:
    kind: str = "http"  # "http" or "mock"
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "default"
    temperature: float = 0.0
    max_retries: int = 3
    request_timeout: float = 60.0
    logprob_support: str = "auto"  # "yes", "no" or "auto"
    top_logprobs: int = 5
    parallelism: int = 1
    backoff_base: float = 0.5
    api_key_env: str = "PROMPTENS_API_KEY"
    mock: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.logprob_support not in ("yes", "no", "auto"):
            raise ValueError(f"logprob_support must be yes/no/auto, got {self.logprob_support!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "BackendConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown backend fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def backend_id(self) -> str:
        if self.kind == "mock":
            blob = json.dumps(self.mock, sort_keys=True)
            return "mock:" + hashlib.sha256(blob.encode()).hexdigest()[:12]
        return f"{self.kind}:{self.base_url}"


@dataclass(frozen=True)
class RequestKey:
    report_id: str
    label: str
    template_id: int | str
    attempt: int = 0


@dataclass(frozen=True)
class RawResponse:
    """Assistant text plus the answer token's log-probabilities, when returned."""

    text: str
    yes_logprob: float | None = None
    no_logprob: float | None = None

    @property
    def has_logprobs(self) -> bool:
        return self.yes_logprob is not None or self.no_logprob is not None


@dataclass(frozen=True)
class PromptResponse:
    report_id: str
    label_name: str
    template_id: int
    answer: str
    p_yes: float
    explanation: str
    parse_status: str  # parsed | recovered | failed
    raw_text: str

    @property
    def parsed(self) -> bool:
        return self.parse_status != "failed"


# --------------------------------------------------------------------------
# parsing


def iter_json_objects(text: str):
    """Yield ``(start, end, obj)`` for every JSON object decodable at a '{'."""
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield pos, end, obj
        pos = text.find("{", pos + 1)


def _normalize_answer(value) -> str | None:
    if not isinstance(value, str):
        return None
    v = value.strip().strip(".").lower()
    if v == "yes":
        return "Yes"
    if v == "no":
        return "No"
    return None


def parse_answer_json(raw_text: str) -> tuple[str, str, str]:
    """Return ``(answer, explanation, status)`` from a model reply.

    status is ``"parsed"`` when the whole reply is the JSON object and
    ``"recovered"`` when it was found embedded in other text.
    """
    for start, end, obj in iter_json_objects(raw_text):
        answer = _normalize_answer(obj.get("Answer"))
        if answer is None:
            continue
        explanation = obj.get("Explanation", "")
        if not isinstance(explanation, str):
            explanation = json.dumps(explanation, ensure_ascii=False)
        whole = raw_text[:start].strip() == "" and raw_text[end:].strip() == ""
        return answer, explanation, "parsed" if whole else "recovered"
    raise AnswerParseError(f"no JSON answer object in: {raw_text[:80]!r}")


def _lse(values: list[float]) -> float | None:
    if not values:
        return None
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


def read_completion(body: Mapping[str, Any]) -> RawResponse:
    """Pull the message text and answer-token log-probabilities from a response body."""
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion body: {exc}") from exc
    content = ((choice.get("logprobs") or {}).get("content")) or []
    for tok in content:
        if _normalize_answer(str(tok.get("token", "")).strip().strip('"')) is None:
            continue
        yes, no = [], []
        entries = list(tok.get("top_logprobs") or [])
        if not any(e.get("token") == tok.get("token") for e in entries):
            entries.append({"token": tok.get("token"), "logprob": tok.get("logprob")})
        for e in entries:
            kind = _normalize_answer(str(e.get("token", "")).strip().strip('"'))
            if kind == "Yes" and e.get("logprob") is not None:
                yes.append(float(e["logprob"]))
            elif kind == "No" and e.get("logprob") is not None:
                no.append(float(e["logprob"]))
        return RawResponse(text, _lse(yes), _lse(no))
    return RawResponse(text)


def logprob_p_yes(yes_logprob: float | None, no_logprob: float | None) -> float:
    """Two-way softmax over the Yes/No answer-token log-probabilities.

    A missing side counts as log-probability -inf.
    """
    if yes_logprob is None and no_logprob is None:
        raise LogprobUnavailable("no answer-token log-probabilities")
    if yes_logprob is None:
        return 0.0
    if no_logprob is None:
        return 1.0
    d = yes_logprob - no_logprob
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def extract_probability(
    raw: RawResponse | Sequence[str], strategy: str, answer: str | None = None, allow_fallback: bool = True
) -> float:
    """Yes-probability for one response.

    ``"logprob"`` uses the answer-token log-probabilities (falling back to
    ``"hard"`` when they are absent and ``allow_fallback``), ``"hard"`` maps
    the parsed answer to 1/0, and ``"vote-k"`` takes the fraction of Yes in a
    sequence of parsed answers.
    """
    if strategy == "vote-k":
        answers = list(raw)
        if not answers:
            raise ValueError("vote-k needs at least one parsed answer")
        return sum(a == "Yes" for a in answers) / len(answers)
    if strategy == "logprob":
        try:
            return logprob_p_yes(raw.yes_logprob, raw.no_logprob)
        except LogprobUnavailable:
            if not allow_fallback:
                raise
            strategy = "hard"
    if strategy == "hard":
        if answer not in ANSWERS:
            raise ValueError(f"hard strategy needs a parsed answer, got {answer!r}")
        return 1.0 if answer == "Yes" else 0.0
    raise ValueError(f"unknown probability strategy {strategy!r}")


# --------------------------------------------------------------------------
# backends


class HttpBackend:
    """POSTs OpenAI-style chat-completion requests."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=config.request_timeout,
            transport=transport,
        )

    def complete(self, payload: dict, key: RequestKey) -> dict:
        try:
            resp = self._client.post("chat/completions", json=payload)
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code)
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError("response body is not JSON", status=resp.status_code) from exc

    def close(self):
        self._client.close()


def stable_seed(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _completion_body(text: str, answer: str | None = None, p_answer: float | None = None) -> dict:
    choice: dict = {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
    if answer is not None:
        other = "No" if answer == "Yes" else "Yes"
        lp, lo = math.log(p_answer), math.log1p(-p_answer)
        head, _, tail = text.partition(answer)
        choice["logprobs"] = {
            "content": [
                {"token": head, "logprob": 0.0, "top_logprobs": []},
                {
                    "token": answer,
                    "logprob": lp,
                    "top_logprobs": [{"token": answer, "logprob": lp}, {"token": other, "logprob": lo}],
                },
                {"token": tail, "logprob": 0.0, "top_logprobs": []},
            ]
        }
    return {"object": "chat.completion", "choices": [choice]}


_EXPLAIN = {
    ("Yes", True): "The report explicitly describes {label}.",
    ("No", True): "The report clearly states there is no {label}.",
    ("Yes", False): "The report may possibly be consistent with {label}.",
    ("No", False): "The report does not seem to mention {label}, though it is unclear.",
}
HEDGE_MARKERS = ("may possibly", "unclear")


class MockBackend:
    """Seeded stand-in for an extraction model with controllable per-template accuracy.

    Each (report, label) case is "clear" with probability ``clear_fraction``,
    in which case every template answers correctly. Otherwise template ``i``
    answers correctly with the probability that keeps its marginal accuracy
    equal to ``template_accuracy[i]``. Correct answers carry confidence drawn
    from ``correct_confidence``, wrong ones from ``wrong_confidence``; answers
    below ``firm_confidence`` get a hedged explanation.
    """

    def __init__(self, config: BackendConfig, truth: Callable[[str, str], bool]):
        m = dict(config.mock)
        self.seed = int(m.get("seed", 0))
        self.accuracy = {int(k): float(v) for k, v in m.get("template_accuracy", {}).items()} or {
            i + 1: a for i, a in enumerate((0.9, 0.9, 0.9, 0.55, 0.55, 0.55))
        }
        self.clear_fraction = min(float(m.get("clear_fraction", 0.5)), min(self.accuracy.values()))
        self.correct_conf = tuple(m.get("correct_confidence", (0.85, 0.999)))
        self.wrong_conf = tuple(m.get("wrong_confidence", (0.5, 0.8)))
        self.firm_confidence = float(m.get("firm_confidence", 0.9))
        self.fail_rate = float(m.get("fail_rate", 0.0))
        self.prose_rate = float(m.get("prose_rate", 0.0))
        self.always_fail = set(int(t) for t in m.get("always_fail_templates", ()))
        self.with_logprobs = bool(m.get("logprobs", True))
        self.transport_failures = int(m.get("transport_failures", 0))
        self.truth = truth
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, payload: dict, key: RequestKey) -> dict:
        with self._lock:
            self.calls += 1
            if self.calls <= self.transport_failures:
                raise TransportError("mock transport failure", status=500)
        tid = int(key.template_id)
        case_rng = np.random.default_rng(stable_seed(self.seed, key.report_id, key.label))
        rng = np.random.default_rng(stable_seed(self.seed, key.report_id, key.label, tid, key.attempt))
        clear = case_rng.random() < self.clear_fraction
        if tid in self.always_fail or rng.random() < self.fail_rate:
            return _completion_body("I am unable to determine this from the report.")
        acc = self.accuracy.get(tid, 0.5)
        p_correct_unclear = (acc - self.clear_fraction) / (1.0 - self.clear_fraction) if self.clear_fraction < 1 else acc
        correct = clear or rng.random() < p_correct_unclear
        truth = bool(self.truth(key.report_id, key.label))
        says_yes = truth if correct else not truth
        lo, hi = self.correct_conf if correct else self.wrong_conf
        conf = float(lo + (hi - lo) * rng.random())
        answer = "Yes" if says_yes else "No"
        expl = _EXPLAIN[answer, conf >= self.firm_confidence].format(label=key.label)
        text = json.dumps({"Answer": answer, "Explanation": expl})
        if rng.random() < self.prose_rate:
            text = f"Here is my answer: {text} Let me know if you need more."
        if not self.with_logprobs:
            return _completion_body(text)
        return _completion_body(text, answer, conf)


class MockJudge:
    """Seeded judge stand-in whose verdict follows answer agreement.

    Counts the Yes/No answers listed in the judge prompt, giving answers with
    a hedged explanation ``hedged_weight``. Weighted agreement of at least
    ``definitely_agreement`` gives a Definitely verdict, at least
    ``likely_agreement`` a Likely verdict, anything lower Uncertain.
    """

    def __init__(self, config: BackendConfig):
        m = dict(config.mock)
        self.definitely = float(m.get("definitely_agreement", 0.8))
        self.likely = float(m.get("likely_agreement", 0.6))
        self.hedged_weight = float(m.get("hedged_weight", 0.5))
        self.fail_rate = float(m.get("fail_rate", 0.0))
        self.fixed = m.get("fixed_decision")
        self.seed = int(m.get("seed", 0))
        self.calls = 0

    def complete(self, payload: dict, key: RequestKey) -> dict:
        self.calls += 1
        prompt = payload["messages"][-1]["content"]
        rng = np.random.default_rng(stable_seed(self.seed, key.report_id, key.label, "judge", key.attempt))
        if rng.random() < self.fail_rate:
            return _completion_body("The answers are mixed, I cannot decide.")
        if self.fixed is not None:
            decision, why = self.fixed, "Fixed mock verdict."
        else:
            yes = no = 0.0
            answer = None
            for line in prompt.splitlines():
                if line.startswith("- Answer "):
                    answer = line.split(":", 1)[1].strip()
                elif line.startswith("  Explanation ") and answer is not None:
                    hedged = any(h in line for h in HEDGE_MARKERS)
                    weight = self.hedged_weight if hedged else 1.0
                    yes += weight * (answer == '"Yes"')
                    no += weight * (answer == '"No"')
                    answer = None
            n = yes + no
            top = max(yes, no) / n if n else 0.0
            side = "Yes" if yes > no else "No"
            if top >= self.definitely:
                decision = f"Definitely {side}"
            elif top >= self.likely:
                decision = f"Likely {side}"
            else:
                decision = "Uncertain"
            why = f"Weighted agreement {top:.2f} across the answers."
        return _completion_body(json.dumps({"Decision": decision, "Explanation": why}))


def make_backend(config: BackendConfig, role: str = "extraction", truth=None, transport=None):
    if config.kind == "http":
        return HttpBackend(config, transport=transport)
    if config.kind == "mock":
        if role == "judge":
            return MockJudge(config)
        if truth is None:
            raise ValueError("mock extraction backend needs a ground-truth lookup")
        return MockBackend(config, truth)
    raise ValueError(f"unknown backend kind {config.kind!r}")


# --------------------------------------------------------------------------
# cache + gateway


def cache_key(config: BackendConfig, key: RequestKey) -> str:
    return json.dumps(
        [config.backend_id, config.model_name, config.temperature, key.template_id, key.label, key.report_id, key.attempt],
        ensure_ascii=False,
    )


class ResponseCache:
    """Append-only line-delimited JSON store of raw responses, one line per attempt."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, RawResponse] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    lp = rec.get("logprobs") or {}
                    self._entries[rec["key"]] = RawResponse(rec["raw_text"], lp.get("yes"), lp.get("no"))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> RawResponse | None:
        return self._entries.get(key)

    def put(self, key: str, raw: RawResponse) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = raw
            if self.path:
                rec = {"key": key, "raw_text": raw.text}
                rec["logprobs"] = {"yes": raw.yes_logprob, "no": raw.no_logprob} if raw.has_logprobs else None
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


class Gateway:
    """Cache-aware, retrying access to one backend."""

    def __init__(self, config: BackendConfig, backend, cache: ResponseCache | None = None, sleep=time.sleep):
        self.config = config
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache()
        self.sleep = sleep
        self.requests = 0
        self._lock = threading.Lock()

    def payload(self, prompt: str) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        if self.config.logprob_support != "no":
            body["logprobs"] = True
            body["top_logprobs"] = self.config.top_logprobs
        return body

    def is_cached(self, key: RequestKey) -> bool:
        return cache_key(self.config, key) in self.cache

    def query(self, prompt: str, key: RequestKey) -> RawResponse:
        ck = cache_key(self.config, key)
        hit = self.cache.get(ck)
        if hit is not None:
            return hit
        payload = self.payload(prompt)
        last: TransportError | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            with self._lock:
                self.requests += 1
            try:
                body = self.backend.complete(payload, key)
                raw = read_completion(body)
            except TransportError as exc:
                last = exc
                logger.warning("request %s failed (try %d): %s", key, attempt + 1, exc)
                continue
            self.cache.put(ck, raw)
            return raw
        raise TransportError(f"retries exhausted for {key}: {last}", status=last.status if last else None)


def _failed(report_id, label, template_id, raw_text) -> PromptResponse:
    return PromptResponse(report_id, label, template_id, FAILED_ANSWER, FAILED_P_YES, "", "failed", raw_text)


def query_template(
    gateway: Gateway,
    template: PromptTemplate,
    report_id: str,
    report_text: str,
    label: str,
    strategy: str = "logprob",
    vote_k: int = 5,
) -> PromptResponse:
    """One ensemble member: query, parse (re-asking on parse failure) and score."""
    prompt = render_prompt(template, label, report_text)
    cfg = gateway.config
    allow_fallback = cfg.logprob_support != "yes"
    if cfg.logprob_support == "no" and strategy == "logprob":
        strategy = "hard"
    if strategy == "vote-k":
        parsed = []
        for attempt in range(vote_k):
            raw = gateway.query(prompt, RequestKey(report_id, label, template.template_id, attempt))
            try:
                parsed.append((raw, *parse_answer_json(raw.text)))
            except AnswerParseError:
                continue
        if not parsed:
            return _failed(report_id, label, template.template_id, raw.text)
        p = extract_probability([a for _, a, _, _ in parsed], "vote-k")
        raw0, _, expl, status = parsed[0]
        return PromptResponse(report_id, label, template.template_id, "Yes" if p > 0.5 else "No", p, expl, status, raw0.text)

    raw = None
    for attempt in range(cfg.max_retries + 1):
        raw = gateway.query(prompt, RequestKey(report_id, label, template.template_id, attempt))
        try:
            answer, expl, status = parse_answer_json(raw.text)
        except AnswerParseError:
            continue
        p = extract_probability(raw, strategy, answer, allow_fallback=allow_fallback)
        return PromptResponse(report_id, label, template.template_id, answer, p, expl, status, raw.text)
    return _failed(report_id, label, template.template_id, raw.text if raw else "")


def cached_ensemble_query(
    report, label: str, prompt_set: Sequence[PromptTemplate], gateway: Gateway, strategy: str = "logprob", vote_k: int = 5
) -> list[PromptResponse]:
    """One response per template, in template order."""
    return [
        query_template(gateway, t, report.report_id, report.text, label, strategy=strategy, vote_k=vote_k)
        for t in prompt_set
    ]


def response_to_json(r: PromptResponse) -> dict:
    return asdict(r)
