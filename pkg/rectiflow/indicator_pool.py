"""
Indicator pool: persistent store of failure patterns with exact cosine
retrieval over trigger-condition embeddings and dedup-gated insertion.
"""
import dataclasses
import json
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from rectiflow.backends import BackendRegistry, ChatMessage
from rectiflow.domain import (
    DimensionMismatchError,
    Indicator,
    SamplingParams,
    canonical_json,
    cosine_similarity,
)
from rectiflow.prompts import PromptLibrary, get_prompt_library, load_general_indicators

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ('name', 'definition', 'trigger_condition')


class PoolFormatError(ValueError):
    """Malformed pool file line."""

    def __init__(self, message: str, line: int = None, field: str = None):
        super().__init__(message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class RetrievalHit:
    indicator: Indicator
    score: float
    rank: int


class IndicatorPool:
    """
    Ordered, append-only collection of indicators sharing one embedding
    dimension. Missing embeddings are filled lazily through the embedder
    on first retrieval.
    """

    def __init__(self, dimension: int, entries: Sequence[Indicator] = ()):
        if dimension <= 0:
            raise ValueError("pool dimension must be positive")
        self.dimension = dimension
        self._entries: List[Indicator] = []
        self._lock = threading.Lock()
        for indicator in entries:
            self.add(indicator)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    @property
    def entries(self) -> List[Indicator]:
        return list(self._entries)

    def _check_dimension(self, vector, label: str):
        if vector is not None and len(vector) != self.dimension:
            raise DimensionMismatchError(
                f"{label} has dimension {len(vector)}, pool dimension is {self.dimension}")

    def add(self, indicator: Indicator):
        self._check_dimension(indicator.embedding_condition, f"'{indicator.name}' embedding_condition")
        self._check_dimension(indicator.embedding_dedup, f"'{indicator.name}' embedding_dedup")
        with self._lock:
            self._entries.append(indicator)

    def ensure_embeddings(self, registry: BackendRegistry, dedup: bool = False):
        """Embed trigger conditions (and d ⊕ c when `dedup`) that are still missing."""
        if registry.dimension != self.dimension:
            raise DimensionMismatchError(
                f"embedder dimension {registry.dimension} != pool dimension {self.dimension}")
        with self._lock:
            for i, indicator in enumerate(self._entries):
                updates = {}
                if indicator.embedding_condition is None:
                    updates['embedding_condition'] = tuple(registry.embed(indicator.trigger_condition).tolist())
                if dedup and indicator.embedding_dedup is None:
                    updates['embedding_dedup'] = tuple(registry.embed(indicator.dedup_text).tolist())
                if updates:
                    self._entries[i] = dataclasses.replace(indicator, **updates)

    def to_jsonl(self) -> str:
        return ''.join(canonical_json(ind.to_dict()) + '\n' for ind in self._entries)

    @staticmethod
    def append_to(path: Union[str, Path], indicator: Indicator):
        """Append one canonical line, so a partial file is always a valid pool."""
        with open(path, 'a', encoding='utf-8') as handle:
            handle.write(canonical_json(indicator.to_dict()) + '\n')
            handle.flush()


def _parse_pool_line(line: str, line_no: int) -> Indicator:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise PoolFormatError(f"line {line_no}: invalid JSON ({e.msg})", line=line_no) from e
    if not isinstance(record, dict):
        raise PoolFormatError(f"line {line_no}: expected a JSON object", line=line_no)
    for field_name in REQUIRED_FIELDS:
        if not record.get(field_name):
            raise PoolFormatError(f"line {line_no}: missing field '{field_name}'",
                                  line=line_no, field=field_name)
    for field_name in ('embedding_condition', 'embedding_dedup'):
        value = record.get(field_name)
        if value is not None and not (isinstance(value, list) and all(isinstance(x, (int, float)) for x in value)):
            raise PoolFormatError(f"line {line_no}: '{field_name}' must be a list of numbers",
                                  line=line_no, field=field_name)
    return Indicator.from_dict(record)


def load_pool(path: Union[str, Path], dimension: int) -> IndicatorPool:
    """Load a line-delimited JSON pool file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pool file not found: {path}")

    pool = IndicatorPool(dimension)
    with open(path, encoding='utf-8') as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            indicator = _parse_pool_line(line, line_no)
            try:
                pool.add(indicator)
            except DimensionMismatchError as e:
                raise PoolFormatError(f"line {line_no}: {e}", line=line_no) from e

    logger.info(f"Loaded indicator pool: {len(pool)} entries from {path}")
    return pool


def save_pool(pool: IndicatorPool, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pool.to_jsonl(), encoding='utf-8')
    logger.info(f"Saved indicator pool: {len(pool)} entries to {path}")


def _rank(scores: List[float], k: int) -> List[int]:
    # Descending score, earlier insertion wins ties
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:min(k, len(scores))]


def retrieve_top_k(pool: IndicatorPool, query: Sequence[float], k: int) -> List[RetrievalHit]:
    """Exact top-k by cosine similarity between query and trigger-condition embeddings."""
    if k <= 0:
        raise ValueError("k must be positive")
    query = np.asarray(query, dtype=float)
    if query.shape != (pool.dimension,):
        raise DimensionMismatchError(
            f"query dimension {query.shape[0] if query.ndim else 0} != pool dimension {pool.dimension}")

    entries = pool.entries
    missing = [ind.name for ind in entries if ind.embedding_condition is None]
    if missing:
        raise ValueError(f"{len(missing)} indicators lack condition embeddings; call ensure_embeddings first")

    scores = [cosine_similarity(query, ind.embedding_condition) for ind in entries]
    return [
        RetrievalHit(indicator=entries[i], score=scores[i], rank=rank)
        for rank, i in enumerate(_rank(scores, k), start=1)
    ]


def retrieve_random_k(pool: IndicatorPool, k: int, seed: int) -> List[RetrievalHit]:
    """Uniform sample without replacement; used to ablate semantic retrieval."""
    entries = pool.entries
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(entries), size=min(k, len(entries)), replace=False) if entries else []
    return [RetrievalHit(indicator=entries[int(i)], score=0.0, rank=rank)
            for rank, i in enumerate(chosen, start=1)]


def nearest_neighbors(pool: IndicatorPool, registry: BackendRegistry, text: str, k: int) -> List[RetrievalHit]:
    """Embed free text and retrieve against trigger conditions (debugging aid)."""
    pool.ensure_embeddings(registry)
    return retrieve_top_k(pool, registry.embed(text), k)


def _dedup_neighbors(pool: IndicatorPool, vector: np.ndarray, k: int) -> List[Indicator]:
    entries = pool.entries
    scores = [cosine_similarity(vector, ind.embedding_dedup) for ind in entries]
    return [entries[i] for i in _rank(scores, k)]


def _indicator_block(indicator: Indicator) -> str:
    return (f"Name: {indicator.name}\n"
            f"Definition: {indicator.definition}\n"
            f"Trigger Condition: {indicator.trigger_condition}")


_DEDUP_ANSWER = re.compile(r'\b(NOVEL|DUPLICATE)\b', re.IGNORECASE)


def parse_dedup_answer(text: str) -> bool:
    """True when the candidate is novel; the last label wins, unparseable answers count as novel."""
    labels = _DEDUP_ANSWER.findall(text or '')
    if not labels:
        logger.warning(f"Unparseable dedup answer, treating as NOVEL: {(text or '')[:80]!r}")
        return True
    return labels[-1].upper() == 'NOVEL'


def insert_with_dedup(pool: IndicatorPool, candidate: Indicator, registry: BackendRegistry,
                      dedup_backend_id: str, k_dedup: int, dedup_enabled: bool = True,
                      prompts: PromptLibrary = None, params: SamplingParams = None) -> bool:
    """
    Embed the candidate (c for retrieval, d ⊕ c for dedup), compare it against
    its k_dedup nearest neighbours through the dedup backend and append it
    only when judged novel. Backend failures propagate untouched.
    """
    prompts = prompts or get_prompt_library()
    params = params or SamplingParams(temperature=0.0)

    candidate = dataclasses.replace(
        candidate,
        embedding_condition=tuple(registry.embed(candidate.trigger_condition).tolist()),
        embedding_dedup=tuple(registry.embed(candidate.dedup_text).tolist()),
    )

    if len(pool) == 0 or not dedup_enabled:
        pool.add(candidate)
        return True

    pool.ensure_embeddings(registry, dedup=True)
    neighbors = _dedup_neighbors(pool, np.asarray(candidate.embedding_dedup), k_dedup)
    prompt = prompts.render(
        'dedup',
        candidate_block=_indicator_block(candidate),
        neighbor_blocks=[_indicator_block(ind) for ind in neighbors],
    )
    answer = registry.generate(dedup_backend_id, [ChatMessage('user', prompt)], params)
    if not parse_dedup_answer(answer):
        logger.info(f"Dedup gate dropped '{candidate.name}' as duplicate")
        return False

    pool.add(candidate)
    logger.debug(f"Inserted '{candidate.name}' (pool size {len(pool)})")
    return True


def general_indicator(domain_tag: str) -> Indicator:
    """The always-triggering general indicator for zero-shot operation."""
    bundled = load_general_indicators()
    if domain_tag not in bundled:
        raise ValueError(f"no general indicator for domain '{domain_tag}' (known: {', '.join(sorted(bundled))})")
    return Indicator.from_dict(bundled[domain_tag])
