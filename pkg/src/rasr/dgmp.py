"""Domain-guided reasoning: prompts, pluggable clients, hallucination gate.

Reports are produced per (record, modality) by a reasoning client, scored
for confidence against the reference reports carried by the retrieved
context, and encoded into parsing feature vectors.  The stub backends are
pure functions of their inputs, which makes the whole stage bitwise
reproducible; the http backends speak a chat-completions-compatible JSON
protocol.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .corpus import FAKE_MARKER, REAL_MARKER, VideoRecord
from .cspr import RetrievedContext
from .errors import BackendError, DataError
from .numerics import cosine, l2_normalize

MODALITY_TASKS = {
    "v": "Analyze the authenticity of video frames.",
    "t": "Analyze the authenticity of textual content.",
    "a": "Analyze the authenticity of audio content.",
}

MODALITY_INSTRUCTIONS = {
    "v": (
        "Please analyze the provided video frames, focusing on potential "
        "inconsistencies related to the domain and reference samples "
        "(facial expressions, scene logic, lighting anomalies, etc.). "
        "Output a brief analysis report:"
    ),
    "t": (
        "Please analyze the provided textual content, focusing on potential "
        "inconsistencies related to the domain and reference samples "
        "(claim plausibility, source framing, exaggerated wording, etc.). "
        "Output a brief analysis report:"
    ),
    "a": (
        "Please analyze the provided audio content, focusing on potential "
        "inconsistencies related to the domain and reference samples "
        "(voice continuity, background sounds, narration tone, etc.). "
        "Output a brief analysis report:"
    ),
}

# Polarity phrases the stub client emits when a synthetic marker is found.
STUB_FAKE_PHRASE = "fabricated narrative inconsistency detected across staged segments"
STUB_REAL_PHRASE = "consistent authentic account verified with corroborated sourcing"
STUB_NEUTRAL_PHRASE = "inconclusive mixed evidence signal without definitive indicators"


@dataclass(frozen=True)
class PromptSpec:
    """Four-field prompt template: task, domain, references, instruction."""

    modality: str
    domain: str
    reference_lines: tuple[str, ...]
    include_domain: bool = True

    def render(self) -> str:
        lines = [f"Task: {MODALITY_TASKS[self.modality]}"]
        if self.include_domain:
            lines.append(f"Domain: {self.domain}.")
        if self.reference_lines:
            lines.append("Reference samples: Retrieved samples with similar claims:")
            lines.extend(self.reference_lines)
        else:
            lines.append("Reference samples: No reference samples available.")
        lines.append(f"Instruction: {MODALITY_INSTRUCTIONS[self.modality]}")
        return "\n".join(lines)


def build_prompt(
    modality: str,
    domain,
    context: RetrievedContext,
    char_budget: int = 240,
    include_domain: bool = True,
) -> str:
    """Render the domain-aware prompt for one modality."""
    if modality not in MODALITY_TASKS:
        raise DataError(f"unknown modality {modality!r}")
    refs = []
    for item in context.items:
        label = "fake" if item.label == 1 else "real"
        line = f"- [{item.video_id}] ({label}, {item.domain.value}) {item.text_digest}"
        refs.append(line[:char_budget])
    return PromptSpec(
        modality=modality,
        domain=domain.value if hasattr(domain, "value") else str(domain),
        reference_lines=tuple(refs),
        include_domain=include_domain,
    ).render()


# ---------------------------------------------------------------------------
# reasoning clients
# ---------------------------------------------------------------------------

def _stable_digest(*parts) -> int:
    payload = "␟".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


_STUB_FILLER = (
    "granite", "aurora", "basalt", "juniper", "onyx", "tundra", "sienna",
    "umber", "zephyr", "indigo", "larkspur", "obsidian",
)


def _prompt_domain(prompt: str) -> str | None:
    for line in prompt.splitlines():
        if line.startswith("Domain:"):
            return line[len("Domain:"):].strip().rstrip(".")
    return None


class StubReasoningClient:
    """Deterministic reasoning backend for tests and desk-scale runs.

    The report text is a pure function of (record text markers, the
    prompt's domain line, modality, record id, attempt, seed); polarity
    follows the synthetic marker tokens.
    """

    backend = "stub"

    def __init__(self, seed: int = 0, temperature: float = 0.2, top_p: float = 0.9,
                 max_tokens: int = 256):
        self.seed = seed
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens

    def complete(self, prompt: str, record: VideoRecord, modality: str, attempt: int = 0) -> str:
        domain = _prompt_domain(prompt)
        if FAKE_MARKER in record.text:
            polarity = STUB_FAKE_PHRASE
        elif REAL_MARKER in record.text:
            polarity = STUB_REAL_PHRASE
        else:
            polarity = STUB_NEUTRAL_PHRASE
        h = _stable_digest(self.seed, record.id, modality, attempt)
        filler = _STUB_FILLER[h % len(_STUB_FILLER)]
        parts = [f"{modality}-report:"]
        if domain:
            parts.append(f"domain {domain.lower()}")
        parts.append(polarity)
        parts.append(filler)
        return " ".join(parts)


class HttpReasoningClient:
    """Chat-completions JSON backend with retry and exponential backoff."""

    backend = "http"

    def __init__(
        self,
        url: str | None = None,
        model: str = "default",
        token: str | None = None,
        temperature: float = 0.2,
        top_p: float = 0.9,
        max_tokens: int = 256,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 30.0,
        audit_path: str | None = None,
        sleeper=time.sleep,
    ):
        self.url = url or os.environ.get("RASR_CHAT_URL", "")
        self.model = model
        self.token = token if token is not None else os.environ.get("RASR_API_TOKEN")
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.audit_path = audit_path
        self._sleep = sleeper
        if not self.url:
            raise DataError("http reasoning backend needs a URL (RASR_CHAT_URL)")

    def complete(self, prompt: str, record: VideoRecord, modality: str, attempt: int = 0) -> str:
        digest = _feature_digest(record, modality)
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": "You are a fake-news-video analysis assistant."},
                {"role": "user", "content": f"{prompt}\nContent: {record.text}\n{digest}"},
            ],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        payload = _post_json(
            self.url, body, self.token, self.retries, self.backoff, self.timeout,
            self._sleep, self.audit_path,
        )
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendError(f"malformed chat completion response: {payload!r}") from None
        if not text:
            raise BackendError("chat backend returned an empty completion")
        return text


def _feature_digest(record: VideoRecord, modality: str) -> str:
    vec = record.feature(modality)
    return (
        f"Signal digest ({modality}): mean={vec.mean():.4f} "
        f"std={vec.std():.4f} norm={np.linalg.norm(vec):.4f}"
    )


def _post_json(url, body, token, retries, backoff, timeout, sleeper, audit_path):
    import requests

    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last = None
    for attempt in range(retries):
        try:
            resp = requests.post(url, json=body, headers=headers, timeout=timeout)
            if audit_path:
                with open(audit_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({
                        "url": url, "status": resp.status_code, "request": body,
                        "response": resp.text[:4096],
                    }, sort_keys=True) + "\n")
            if resp.status_code // 100 == 2:
                return resp.json()
            last = BackendError(f"{url} returned {resp.status_code}")
        except BackendError as exc:
            last = exc
        except Exception as exc:  # timeouts, connection errors
            last = BackendError(f"{url}: {exc}")
        if attempt + 1 < retries:
            sleeper(backoff * (2 ** attempt))
    raise last if last else BackendError(f"{url}: request failed")


def generate_report(client, modality: str, record: VideoRecord, prompt: str,
                    attempt: int = 0) -> str:
    """One reasoning round-trip for a (record, modality) pair."""
    return client.complete(prompt, record, modality, attempt)


# ---------------------------------------------------------------------------
# report embedding
# ---------------------------------------------------------------------------

class StubReportEmbedder:
    """Seeded token-hash embedding: deterministic, unit-normalized."""

    backend = "stub"

    def __init__(self, dim: int = 384, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            rng = np.random.default_rng(_stable_digest(self.seed, token))
            vec = rng.standard_normal(self.dim)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = [t.strip(".,:;!?()[]") for t in text.lower().split()]
        tokens = [t for t in tokens if t]
        if not tokens:
            raise DataError("cannot embed empty text")
        acc = np.zeros(self.dim)
        for t in tokens:
            acc += self._token_vec(t)
        return l2_normalize(acc)


class HttpReportEmbedder:
    """Embedding endpoint backend: POST {model, input:[text]}."""

    backend = "http"

    def __init__(
        self,
        url: str | None = None,
        model: str = "default-embed",
        token: str | None = None,
        dim: int = 384,
        retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 30.0,
        audit_path: str | None = None,
        sleeper=time.sleep,
    ):
        self.url = url or os.environ.get("RASR_EMBED_URL", "")
        self.model = model
        self.token = token if token is not None else os.environ.get("RASR_API_TOKEN")
        self.dim = dim
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.audit_path = audit_path
        self._sleep = sleeper
        if not self.url:
            raise DataError("http embedding backend needs a URL (RASR_EMBED_URL)")

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise DataError("cannot embed empty text")
        body = {"model": self.model, "input": [text]}
        payload = _post_json(
            self.url, body, self.token, self.retries, self.backoff, self.timeout,
            self._sleep, self.audit_path,
        )
        try:
            vec = np.asarray(payload["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError):
            raise BackendError(f"malformed embedding response: {payload!r}") from None
        if vec.shape != (self.dim,):
            raise DataError(f"embedding has dim {vec.shape}, expected ({self.dim},)")
        return vec


def embed_report(text: str, embedder) -> np.ndarray:
    """Encode a report into a unit-norm parsing feature."""
    if not text:
        raise DataError("cannot embed an empty report")
    return l2_normalize(embedder.embed(text))


# ---------------------------------------------------------------------------
# confidence gating
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalysisReport:
    """One modality's reasoning output with its gating verdict."""

    modality: str
    text: str
    confidence: float
    low_confidence: bool
    attempts: int
    parsing_feature: np.ndarray


def compute_confidence(report_text: str, context: RetrievedContext, embedder,
                       modality: str) -> float:
    """Mean cosine between the report and the stored reference reports.

    Context items lacking a stored report for this modality are skipped;
    with no usable evidence the confidence is 1.0.
    """
    refs = [
        item.reports[modality]
        for item in context.items
        if item.reports and modality in item.reports and item.reports[modality].text
    ]
    if not refs:
        return 1.0
    emb = embed_report(report_text, embedder)
    total = 0.0
    for ref in refs:
        total += cosine(emb, embed_report(ref.text, embedder))
    return total / len(refs)


def gate_report(
    client,
    embedder,
    record: VideoRecord,
    modality: str,
    prompt: str,
    context: RetrievedContext,
    theta: float,
    r_max: int,
) -> AnalysisReport:
    """Generate, validate, and (if needed) regenerate one report.

    Keeps the highest-confidence attempt; below-threshold survivors are
    flagged and their parsing feature is scaled by conf/theta clamped to
    [0, 1].  Client errors propagate after the retry budget.
    """
    if not (-1.0 <= theta <= 1.0):
        raise DataError(f"theta must lie in [-1, 1], got {theta}")
    if r_max < 0:
        raise DataError(f"r_max must be >= 0, got {r_max}")
    best_text = None
    best_conf = -np.inf
    attempts = 0
    for attempt in range(r_max + 1):
        text = generate_report(client, modality, record, prompt, attempt=attempt)
        conf = compute_confidence(text, context, embedder, modality)
        attempts += 1
        if conf > best_conf:
            best_text, best_conf = text, conf
        if best_conf >= theta:
            break
    low = best_conf < theta
    feature = embed_report(best_text, embedder)
    if low:
        scale = best_conf / theta if theta > 0 else 0.0
        feature = feature * min(1.0, max(0.0, scale))
    return AnalysisReport(
        modality=modality,
        text=best_text,
        confidence=float(best_conf),
        low_confidence=low,
        attempts=attempts,
        parsing_feature=feature,
    )


def sentinel_report(modality: str, dim: int) -> AnalysisReport:
    """Empty low-confidence stand-in for a failed backend call."""
    return AnalysisReport(
        modality=modality,
        text="",
        confidence=0.0,
        low_confidence=True,
        attempts=1,
        parsing_feature=np.zeros(dim),
    )
