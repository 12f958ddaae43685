"""Log-probability scoring backends.

Three interchangeable scorers share one contract: given (context,
continuation) return the total natural-log probability of the continuation
and its token count. `HttpScorer` talks to a local inference endpoint,
`BigramScorer` is an exact in-process stand-in used for tests and offline
smoke runs, and `CachedScorer` wraps either with an append-only file cache.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .errors import CacheCorruptError, ProtocolError, TransportError

logger = logging.getLogger(__name__)

_ALPHABET = 257  # 256 byte values plus a begin-of-text symbol
_BEGIN = 256
# Per-byte log terms are snapped to multiples of 2**-40. Sums of such terms
# stay exact in float64 up to |logprob| < 2**13, which makes the factorization
# chain rule hold exactly regardless of where a text is split, while staying
# within 5e-13 of the unrounded value per byte.
_QUANT_BITS = 40


@dataclass(frozen=True)
class ScoreRequest:
    """Context and continuation, carried verbatim (no trimming)."""

    context: str
    continuation: str


@dataclass(frozen=True)
class ScoreResult:
    """Total log probability of a continuation and its backend token count."""

    logprob: float
    token_count: int
    model_id: str

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not math.isfinite(self.logprob) or self.logprob > 0.0:
            raise ValueError(f"logprob must be finite and <= 0, got {self.logprob}")
        if self.token_count < 0:
            raise ValueError(f"token_count must be nonnegative, got {self.token_count}")
        if (self.token_count == 0) != (self.logprob == 0.0):
            raise ValueError(
                f"token_count {self.token_count} inconsistent with logprob {self.logprob}"
            )


class Scorer:
    """Interface for scoring backends; results are pure in (model_id, request)."""

    @property
    def model_id(self) -> str:
        raise NotImplementedError

    def score(self, req: ScoreRequest) -> ScoreResult:
        raise NotImplementedError


class BigramScorer(Scorer):
    """Byte-level bigram model with add-one smoothing over 256 bytes + begin symbol.

    Tokens are UTF-8 bytes. The first continuation byte is conditioned on the
    final context byte (or the begin symbol when the context is empty); every
    later byte on its predecessor. P(b|prev) = (count(prev,b)+1)/(count(prev)+257).
    """

    def __init__(self, training_text: str = ""):
        counts = np.zeros((_ALPHABET, 256), dtype=np.int64)
        data = np.frombuffer(training_text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        if data.size:
            prev = np.concatenate(([_BEGIN], data[:-1]))
            np.add.at(counts, (prev, data), 1)
        self._counts = counts
        self._totals = counts.sum(axis=1, dtype=np.int64)
        digest = hashlib.sha256(training_text.encode("utf-8")).hexdigest()
        self._model_id = f"mock-bigram:{digest[:16]}"

    @property
    def model_id(self) -> str:
        return self._model_id

    def score(self, req: ScoreRequest) -> ScoreResult:
        cont = req.continuation.encode("utf-8")
        if not cont:
            return ScoreResult(0.0, 0, self._model_id)
        cur = np.frombuffer(cont, dtype=np.uint8).astype(np.int64)
        ctx = req.context.encode("utf-8")
        first = _BEGIN if not ctx else ctx[-1]
        prev = np.concatenate(([first], cur[:-1]))
        terms = np.log(
            (self._counts[prev, cur] + 1.0) / (self._totals[prev] + float(_ALPHABET))
        )
        terms = np.ldexp(np.rint(np.ldexp(terms, _QUANT_BITS)), -_QUANT_BITS)
        return ScoreResult(float(terms.sum()), len(cont), self._model_id)


class HttpScorer(Scorer):
    """Client for a local logprob endpoint speaking POST /v1/score.

    Transport failures (connection errors, timeouts, HTTP 5xx) are retried
    with exponential backoff up to `retries` attempts; any other non-2xx
    status or a malformed body is a protocol error and surfaces immediately.
    """

    def __init__(
        self,
        endpoint: str,
        retries: int = 3,
        backoff: float = 0.25,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self._url = endpoint.rstrip("/") + "/v1/score"
        self._retries = retries
        self._backoff = backoff
        self._timeout = timeout
        self._shared_session = session  # tests may inject one; else per-thread
        self._local = threading.local()
        self._probed_model_id: str | None = None

    def _session(self) -> requests.Session:
        if self._shared_session is not None:
            return self._shared_session
        if not hasattr(self._local, "session"):
            self._local.session = requests.Session()
        return self._local.session

    @property
    def model_id(self) -> str:
        """Backend model identifier, fetched once via an empty-continuation probe."""
        if self._probed_model_id is None:
            self.score(ScoreRequest("", ""))
        assert self._probed_model_id is not None
        return self._probed_model_id

    def score(self, req: ScoreRequest) -> ScoreResult:
        payload = {"context": req.context, "continuation": req.continuation}
        resp = None
        last_failure = ""
        for attempt in range(1, self._retries + 1):
            if attempt > 1 and self._backoff > 0:
                time.sleep(self._backoff * 2 ** (attempt - 2))
            try:
                resp = self._session().post(self._url, json=payload, timeout=self._timeout)
            except requests.RequestException as e:
                last_failure = f"{type(e).__name__}: {e}"
                resp = None
                continue
            if resp.status_code >= 500:
                last_failure = f"HTTP {resp.status_code}: {resp.text[:200]}"
                continue
            break
        else:
            raise TransportError(
                f"{self._url} failed after {self._retries} attempts ({last_failure})"
            )

        if not 200 <= resp.status_code < 300:
            message = ""
            try:
                message = resp.json().get("error", "")
            except ValueError:
                message = resp.text[:200]
            raise ProtocolError(f"{self._url} returned HTTP {resp.status_code}: {message}")
        try:
            body = resp.json()
        except ValueError as e:
            raise ProtocolError(f"{self._url} returned invalid JSON: {e}") from e
        result = self._parse_body(body)
        self._probed_model_id = result.model_id
        return result

    def _parse_body(self, body) -> ScoreResult:
        if not isinstance(body, dict):
            raise ProtocolError("response body is not a JSON object")
        for key, kinds in (("logprob", (int, float)), ("token_count", int), ("model_id", str)):
            if key not in body:
                raise ProtocolError(f"response missing field {key!r}")
            if isinstance(body[key], bool) or not isinstance(body[key], kinds):
                raise ProtocolError(f"response field {key!r} has wrong type")
        try:
            return ScoreResult(float(body["logprob"]), body["token_count"], body["model_id"])
        except ValueError as e:
            raise ProtocolError(f"backend violated the score contract: {e}") from e


def cache_key(model_id: str, context: str, continuation: str) -> str:
    """SHA-256 over model_id, NUL, context, NUL, continuation (UTF-8 bytes)."""
    h = hashlib.sha256()
    h.update(model_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(context.encode("utf-8"))
    h.update(b"\x00")
    h.update(continuation.encode("utf-8"))
    return h.hexdigest()


def _parse_cache_line(line: str) -> tuple[str, float, int, str]:
    parts = line.rstrip("\n").split(" ", 3)
    if len(parts) != 4:
        raise ValueError(f"expected 4 fields, got {len(parts)}")
    key, raw_lp, raw_tc, model_id = parts
    if len(key) != 64 or any(c not in "0123456789abcdef" for c in key):
        raise ValueError("malformed digest")
    logprob = float(raw_lp)
    token_count = int(raw_tc)
    if token_count < 0 or not model_id:
        raise ValueError("bad token_count or model_id")
    return key, logprob, token_count, model_id


class CachedScorer(Scorer):
    """Write-through, append-only score cache in front of another scorer.

    Entries are keyed by (model_id, context, continuation); hits never touch
    the inner scorer, misses are appended one line per entry. Corrupt lines
    are skipped with a warning unless `strict` is set.
    """

    def __init__(self, inner: Scorer, path: str | Path, strict: bool = False):
        self._inner = inner
        self._path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, ScoreResult] = {}
        self._handle = None
        self.hits = 0
        self.misses = 0
        self.skipped_lines = 0
        if self._path.exists():
            self._load(strict)

    @property
    def model_id(self) -> str:
        return self._inner.model_id

    @property
    def path(self) -> Path:
        return self._path

    def _load(self, strict: bool) -> None:
        with open(self._path, encoding="utf-8", newline="") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.endswith("\n"):
                    # torn final write; treat like any other corrupt line
                    line_ok = False
                else:
                    line_ok = True
                try:
                    if not line_ok:
                        raise ValueError("truncated line")
                    key, logprob, token_count, model_id = _parse_cache_line(line)
                    self._entries[key] = ScoreResult(logprob, token_count, model_id)
                except ValueError as e:
                    if strict:
                        raise CacheCorruptError(f"{self._path}:{lineno}: {e}") from None
                    self.skipped_lines += 1
                    logger.warning("skipping corrupt cache line %s:%d: %s", self._path, lineno, e)

    def _append(self, key: str, result: ScoreResult) -> None:
        if self._handle is None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self._path, "a", encoding="utf-8", newline="")
        self._handle.write(f"{key} {result.logprob!r} {result.token_count} {result.model_id}\n")
        self._handle.flush()

    def score(self, req: ScoreRequest) -> ScoreResult:
        key = cache_key(self._inner.model_id, req.context, req.continuation)
        with self._lock:
            cached = self._entries.get(key)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        result = self._inner.score(req)
        with self._lock:
            if key not in self._entries:
                self._entries[key] = result
                self._append(key, result)
        return result

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None
