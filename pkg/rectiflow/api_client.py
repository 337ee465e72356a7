"""
HTTP client for OpenAI-compatible chat-completions and embeddings endpoints.
Handles authentication, retry with exponential backoff and error mapping.
"""
import requests
import time
import logging
from typing import Dict, List, Optional, Any, Sequence

import numpy as np

from config import Config
from rectiflow.backends import BackendError, ChatMessage
from rectiflow.domain import SamplingParams, DimensionMismatchError

logger = logging.getLogger(__name__)


def _endpoint(base_url: str, path: str) -> str:
    """Join base URL and a /v1 path, tolerating bases that already end in /v1."""
    base = base_url.rstrip('/')
    if base.endswith('/v1'):
        base = base[:-3]
    return f"{base}/v1/{path.lstrip('/')}"


class OpenAICompatibleClient:
    """Session-pooled JSON client with retries."""

    def __init__(self, base_url: str, api_key: str, timeout: float = None,
                 max_retries: int = None, retry_delay: float = None):
        self.base_url = base_url
        self.timeout = timeout or Config.HTTP_TIMEOUT_SECONDS
        self.max_retries = max_retries or Config.HTTP_MAX_RETRIES
        self.retry_delay = Config.HTTP_RETRY_DELAY_SECONDS if retry_delay is None else retry_delay

        # Session for connection pooling
        self.session = requests.Session()
        self.session.headers.update({
            'Authorization': f'Bearer {api_key}',
            'Content-Type': 'application/json',
            'User-Agent': 'rectiflow/1.0',
        })

    def _post(self, path: str, payload: Dict[str, Any]) -> Dict:
        """POST with retries; raise BackendError carrying the attempt count."""
        url = _endpoint(self.base_url, path)
        retry_delay = self.retry_delay
        last_error = None

        for attempt in range(1, self.max_retries + 1):
            try:
                logger.debug(f"POST {path} (attempt {attempt})")
                response = self.session.post(url, json=payload, timeout=self.timeout)

                if response.status_code == 200:
                    return response.json()

                if response.status_code in (401, 403):
                    logger.error(f"API key rejected ({response.status_code})")
                    raise BackendError(f"authentication failed: {response.status_code}", attempts=attempt)

                if response.status_code == 429:
                    logger.warning(f"Rate limit hit (429). Waiting {retry_delay * 2} seconds...")
                    last_error = f"HTTP 429: {response.text[:200]}"
                    if attempt < self.max_retries:
                        time.sleep(retry_delay * 2)
                        retry_delay *= 2
                    continue

                logger.warning(f"Request to {path} failed with status {response.status_code}: {response.text[:200]}")
                last_error = f"HTTP {response.status_code}: {response.text[:200]}"

            except requests.exceptions.Timeout:
                logger.warning(f"Request timeout (attempt {attempt})")
                last_error = "request timeout"

            except requests.exceptions.ConnectionError:
                logger.warning(f"Connection error (attempt {attempt})")
                last_error = "connection error"

            except requests.exceptions.RequestException as e:
                logger.error(f"Request failed: {e}")
                last_error = str(e)

            if attempt < self.max_retries:
                time.sleep(retry_delay)
                retry_delay *= 2

        raise BackendError(f"{path} failed after {self.max_retries} attempts: {last_error}",
                           attempts=self.max_retries)


class OpenAIChatBackend:
    """Generation service speaking POST /v1/chat/completions."""

    def __init__(self, model: str, client: OpenAICompatibleClient = None,
                 extra_body: Optional[Dict[str, Any]] = None):
        self.model = model
        self.client = client or OpenAICompatibleClient(Config.MODEL_BASE_URL, Config.MODEL_API_KEY)
        # Opaque pass-through, e.g. endpoint-specific reasoning switches
        self.extra_body = dict(extra_body or {})
        logger.info(f"Chat backend initialized for model '{model}'")

    def generate(self, messages: Sequence[ChatMessage], params: SamplingParams) -> str:
        payload = {
            'model': self.model,
            'messages': [m.to_dict() for m in messages],
            'temperature': params.temperature,
            'max_tokens': params.max_tokens,
        }
        payload.update(self.extra_body)
        data = self.client._post('chat/completions', payload)
        try:
            return data['choices'][0]['message']['content'] or ''
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed chat completion response: {e}") from e


class OpenAIEmbeddingBackend:
    """Embedding service speaking POST /v1/embeddings."""

    def __init__(self, model: str, dimension: int, client: OpenAICompatibleClient = None):
        self.model = model
        self.dimension = dimension
        self.client = client or OpenAICompatibleClient(Config.EMBED_BASE_URL, Config.EMBED_API_KEY)
        logger.info(f"Embedding backend initialized for model '{model}' (D={dimension})")

    def embed(self, text: str) -> np.ndarray:
        data = self.client._post('embeddings', {'model': self.model, 'input': text})
        try:
            vector = np.asarray(data['data'][0]['embedding'], dtype=float)
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed embedding response: {e}") from e
        if vector.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"embedding endpoint returned {vector.shape[0]} dimensions, configured {self.dimension}")
        return vector
