"""
Generation and embedding services.
Scripted and replay implementations for deterministic runs, a recording
wrapper for live calls, and the registry that binds backend ids to services.
"""
import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from rectiflow.domain import SamplingParams, DimensionMismatchError, canonical_json

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Transport or HTTP failure of a model backend."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class UnknownBackendError(KeyError):
    """Lookup of a backend id that was never registered."""
    pass


class MissingFixtureError(LookupError):
    """A scripted backend has no response for this request."""
    pass


@dataclass(frozen=True)
class ChatMessage:
    role_tag: str  # system | user | assistant
    content: str

    def __post_init__(self):
        if self.role_tag not in ('system', 'user', 'assistant'):
            raise ValueError(f"unknown role tag '{self.role_tag}'")
        if self.role_tag in ('system', 'user') and not self.content:
            raise ValueError(f"{self.role_tag} message content must be non-empty")

    def to_dict(self) -> Dict[str, str]:
        return {'role': self.role_tag, 'content': self.content}


class GenerationService(Protocol):
    def generate(self, messages: Sequence[ChatMessage], params: SamplingParams) -> str:
        ...


class EmbeddingService(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray:
        ...


def request_digest(backend_id: str, messages: Sequence[ChatMessage], temperature: float) -> str:
    """SHA-256 of the canonicalized (backend_id, messages, temperature)."""
    payload = {
        'backend_id': backend_id,
        'messages': [m.to_dict() for m in messages],
        'temperature': float(temperature),
    }
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class ScriptRule:
    """Respond with `response` when every `contains` substring occurs in the request."""
    contains: Tuple[str, ...]
    response: str

    def matches(self, request_text: str) -> bool:
        return all(fragment in request_text for fragment in self.contains)


Responder = Callable[[Sequence[ChatMessage], SamplingParams], Optional[str]]


class ScriptedBackend:
    """Deterministic backend: digest fixtures, then ordered rules, then a responder."""

    def __init__(self, backend_id: str, fixtures: Dict[str, str] = None,
                 rules: Sequence[ScriptRule] = (), responder: Responder = None, record_calls: bool = False):
        self.backend_id = backend_id
        self.fixtures = dict(fixtures or {})
        self.rules = list(rules)
        self.responder = responder
        self.record_calls = record_calls
        self.calls: List[Tuple[ChatMessage, ...]] = []  # only filled when record_calls
        self._lock = threading.Lock()

    def generate(self, messages: Sequence[ChatMessage], params: SamplingParams) -> str:
        messages = tuple(messages)
        if self.record_calls:
            with self._lock:
                self.calls.append(messages)

        digest = request_digest(self.backend_id, messages, params.temperature)
        if digest in self.fixtures:
            return self.fixtures[digest]

        request_text = '\n'.join(m.content for m in messages)
        for rule in self.rules:
            if rule.matches(request_text):
                return rule.response

        if self.responder is not None:
            response = self.responder(messages, params)
            if response is not None:
                return response

        logger.error(f"Missing fixture for backend '{self.backend_id}' (digest {digest[:12]})")
        raise MissingFixtureError(f"no scripted response for backend '{self.backend_id}', digest {digest}")


class ReplayBackend(ScriptedBackend):
    """Serves a recorded transcript by request digest."""

    @classmethod
    def from_transcript(cls, backend_id: str, path: Union[str, Path]) -> 'ReplayBackend':
        fixtures = {}
        with open(path, encoding='utf-8') as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    fixtures[record['key_digest']] = record['response']
                except (json.JSONDecodeError, KeyError) as e:
                    raise ValueError(f"{path}:{line_no}: malformed transcript record: {e}") from e
        logger.info(f"Loaded {len(fixtures)} transcript records for backend '{backend_id}'")
        return cls(backend_id, fixtures=fixtures)


class RecordingBackend:
    """Wraps a live service and appends every call to a transcript file."""

    def __init__(self, backend_id: str, inner: GenerationService, transcript_path: Union[str, Path]):
        self.backend_id = backend_id
        self.inner = inner
        self.transcript_path = Path(transcript_path)
        self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def generate(self, messages: Sequence[ChatMessage], params: SamplingParams) -> str:
        response = self.inner.generate(messages, params)
        record = {
            'key_digest': request_digest(self.backend_id, messages, params.temperature),
            'request': {
                'backend_id': self.backend_id,
                'messages': [m.to_dict() for m in messages],
                'temperature': params.temperature,
                'max_tokens': params.max_tokens,
            },
            'response': response,
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            with open(self.transcript_path, 'a', encoding='utf-8') as handle:
                handle.write(json.dumps(record, ensure_ascii=False) + '\n')
        return response


class ScriptedEmbedder:
    """Seeded hash of the text projected to `dimension` values, L2-normalized."""

    def __init__(self, dimension: int, seed: int = 0, record_calls: bool = False):
        if dimension <= 0:
            raise ValueError("embedding dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self.record_calls = record_calls
        self.calls: List[str] = []
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        if self.record_calls:
            with self._lock:
                self.calls.append(text)
        digest = hashlib.sha256(f"{self.seed}:{text}".encode('utf-8')).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], 'big'))
        vector = rng.standard_normal(self.dimension)
        return vector / np.linalg.norm(vector)


def embedding_digest(text: str) -> str:
    """SHA-256 of the canonicalized embedding request."""
    return hashlib.sha256(canonical_json({'text': text}).encode('utf-8')).hexdigest()


class RecordingEmbedder:
    """Wraps a live embedder and appends every call to a transcript file."""

    def __init__(self, inner: EmbeddingService, transcript_path: Union[str, Path]):
        self.inner = inner
        self.dimension = inner.dimension
        self.transcript_path = Path(transcript_path)
        self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        vector = np.asarray(self.inner.embed(text), dtype=float)
        record = {
            'key_digest': embedding_digest(text),
            'request': {'text': text},
            'response': [float(value) for value in vector],
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        with self._lock:
            with open(self.transcript_path, 'a', encoding='utf-8') as handle:
                handle.write(json.dumps(record, ensure_ascii=False) + '\n')
        return vector


class ReplayEmbedder:
    """Serves recorded embedding vectors by request digest."""

    def __init__(self, dimension: int, vectors: Dict[str, np.ndarray] = None):
        self.dimension = dimension
        self.vectors = dict(vectors or {})

    @classmethod
    def from_transcript(cls, path: Union[str, Path], dimension: int) -> 'ReplayEmbedder':
        vectors = {}
        with open(path, encoding='utf-8') as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    vector = np.asarray(record['response'], dtype=float)
                    digest = record['key_digest']
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise ValueError(f"{path}:{line_no}: malformed embedding record: {e}") from e
                if vector.shape != (dimension,):
                    raise DimensionMismatchError(
                        f"{path}:{line_no}: recorded vector has shape {vector.shape}, expected ({dimension},)")
                vectors[digest] = vector
        logger.info(f"Loaded {len(vectors)} embedding records from {path}")
        return cls(dimension, vectors)

    def embed(self, text: str) -> np.ndarray:
        digest = embedding_digest(text)
        try:
            return self.vectors[digest].copy()
        except KeyError:
            logger.error(f"Missing embedding record (digest {digest[:12]})")
            raise MissingFixtureError(f"no recorded embedding for digest {digest}") from None


class CachedEmbedder:
    """Computes embed(x) at most once per distinct x."""

    def __init__(self, inner: EmbeddingService):
        self.inner = inner
        self.dimension = inner.dimension
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            cached = self._cache.get(text)
            if cached is not None:
                return cached
            vector = np.asarray(self.inner.embed(text), dtype=float)
            if vector.shape != (self.dimension,):
                raise DimensionMismatchError(
                    f"embedder returned shape {vector.shape}, expected ({self.dimension},)")
            vector.setflags(write=False)
            self._cache[text] = vector
            return vector

    def __len__(self):
        return len(self._cache)


class BackendRegistry:
    """Binds backend ids to generation services plus one embedding service."""

    def __init__(self, generators: Dict[str, GenerationService], embedder: EmbeddingService):
        self._generators = dict(generators)
        self.embedder = embedder if isinstance(embedder, CachedEmbedder) else CachedEmbedder(embedder)

    @property
    def dimension(self) -> int:
        return self.embedder.dimension

    def has(self, backend_id: str) -> bool:
        return backend_id in self._generators

    def get(self, backend_id: str) -> GenerationService:
        try:
            return self._generators[backend_id]
        except KeyError:
            raise UnknownBackendError(f"unknown backend '{backend_id}'") from None

    def generate(self, backend_id: str, messages: Sequence[ChatMessage], params: SamplingParams) -> str:
        service = self.get(backend_id)
        logger.debug(f"generate via '{backend_id}' ({len(messages)} messages, T={params.temperature})")
        return service.generate(messages, params)

    def embed(self, text: str) -> np.ndarray:
        return self.embedder.embed(text)


def load_script_file(path: Union[str, Path]) -> Dict[str, ScriptedBackend]:
    """
    Read scripted fixtures: one JSON object per line with `backend_id`,
    `response` (text, or an object/list that is JSON-encoded) and either
    `key_digest` or `contains` (list of substrings). Rule order is file order.
    """
    fixtures: Dict[str, Dict[str, str]] = {}
    rules: Dict[str, List[ScriptRule]] = {}
    with open(path, encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                backend_id = record['backend_id']
                response = record['response']
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{path}:{line_no}: malformed fixture record: {e}") from e
            if not isinstance(response, str):
                response = json.dumps(response, ensure_ascii=False)
            if 'key_digest' in record:
                fixtures.setdefault(backend_id, {})[record['key_digest']] = response
            else:
                contains = record.get('contains') or []
                if isinstance(contains, str):
                    contains = [contains]
                rules.setdefault(backend_id, []).append(ScriptRule(tuple(contains), response))

    backends = {}
    for backend_id in sorted(set(fixtures) | set(rules)):
        backends[backend_id] = ScriptedBackend(
            backend_id, fixtures=fixtures.get(backend_id), rules=rules.get(backend_id, ()))
    logger.info(f"Loaded scripted fixtures for {len(backends)} backends from {path}")
    return backends
