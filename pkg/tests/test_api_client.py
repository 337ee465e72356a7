import os
from unittest.mock import MagicMock, patch

import numpy as np
import pytest
import requests

from config import Config
from rectiflow.api_client import (
    OpenAIChatBackend,
    OpenAICompatibleClient,
    OpenAIEmbeddingBackend,
    _endpoint,
)
from rectiflow.backends import BackendError, ChatMessage
from rectiflow.domain import DimensionMismatchError, SamplingParams


def response(status, payload=None, text=''):
    mock = MagicMock()
    mock.status_code = status
    mock.json.return_value = payload
    mock.text = text
    return mock


def chat_payload(content):
    return {'choices': [{'message': {'role': 'assistant', 'content': content}}]}


@pytest.fixture
def client():
    return OpenAICompatibleClient('https://llm.example/v1', 'sk-test', timeout=5, max_retries=3, retry_delay=1.0)


def test_endpoint_tolerates_v1_suffix():
    assert _endpoint('https://llm.example/v1/', 'chat/completions') == 'https://llm.example/v1/chat/completions'
    assert _endpoint('https://llm.example', '/embeddings') == 'https://llm.example/v1/embeddings'


def test_bearer_header(client):
    assert client.session.headers['Authorization'] == 'Bearer sk-test'


@patch('rectiflow.api_client.time.sleep')
def test_chat_sends_payload_and_extra_body(sleep, client):
    backend = OpenAIChatBackend('small-model', client, extra_body={'enable_thinking': False})
    with patch.object(client.session, 'post', return_value=response(200, chat_payload('hi'))) as post:
        text = backend.generate([ChatMessage('system', 'sys'), ChatMessage('user', 'q')],
                                SamplingParams(temperature=0.0, max_tokens=64))
    assert text == 'hi'
    payload = post.call_args.kwargs['json']
    assert payload['model'] == 'small-model'
    assert payload['messages'] == [{'role': 'system', 'content': 'sys'}, {'role': 'user', 'content': 'q'}]
    assert payload['temperature'] == 0.0 and payload['max_tokens'] == 64
    assert payload['enable_thinking'] is False
    sleep.assert_not_called()


@patch('rectiflow.api_client.time.sleep')
def test_rate_limit_backs_off_then_succeeds(sleep, client):
    replies = [response(429, text='slow down'), response(200, chat_payload('ok'))]
    with patch.object(client.session, 'post', side_effect=replies):
        assert client._post('chat/completions', {})['choices'][0]['message']['content'] == 'ok'
    sleep.assert_called_once_with(2.0)


@patch('rectiflow.api_client.time.sleep')
def test_auth_failure_is_not_retried(sleep, client):
    with patch.object(client.session, 'post', return_value=response(401, text='bad key')) as post:
        with pytest.raises(BackendError) as excinfo:
            client._post('chat/completions', {})
    assert post.call_count == 1
    assert excinfo.value.attempts == 1


@patch('rectiflow.api_client.time.sleep')
def test_server_errors_exhaust_retries(sleep, client):
    with patch.object(client.session, 'post', return_value=response(500, text='boom')) as post:
        with pytest.raises(BackendError) as excinfo:
            client._post('chat/completions', {})
    assert post.call_count == Config.HTTP_MAX_RETRIES
    assert excinfo.value.attempts == 3
    assert [c.args[0] for c in sleep.call_args_list] == [1.0, 2.0]


@patch('rectiflow.api_client.time.sleep')
def test_timeouts_are_retried(sleep, client):
    side_effect = [requests.exceptions.Timeout(), requests.exceptions.ConnectionError(),
                   response(200, {'ok': True})]
    with patch.object(client.session, 'post', side_effect=side_effect):
        assert client._post('embeddings', {}) == {'ok': True}


def test_malformed_chat_response(client):
    backend = OpenAIChatBackend('m', client)
    with patch.object(client.session, 'post', return_value=response(200, {'choices': []})):
        with pytest.raises(BackendError):
            backend.generate([ChatMessage('user', 'q')], SamplingParams())


def test_embedding_dimension_checked(client):
    backend = OpenAIEmbeddingBackend('embed', dimension=4, client=client)
    with patch.object(client.session, 'post', return_value=response(200, {'data': [{'embedding': [0.1, 0.2, 0.3, 0.4]}]})):
        np.testing.assert_allclose(backend.embed('text'), [0.1, 0.2, 0.3, 0.4])
    with patch.object(client.session, 'post', return_value=response(200, {'data': [{'embedding': [0.1, 0.2]}]})):
        with pytest.raises(DimensionMismatchError):
            backend.embed('text')


@pytest.mark.skipif(not (Config.RUN_LIVE_TESTS and Config.MODEL_API_KEY),
                    reason='live endpoint tests need RUN_LIVE_TESTS=1 and MODEL_API_KEY')
def test_live_chat_completion():
    model = os.getenv('LIVE_TEST_MODEL', 'gpt-4o-mini')
    backend = OpenAIChatBackend(model)
    text = backend.generate([ChatMessage('user', 'Reply with the single word: pong')],
                            SamplingParams(temperature=0.0, max_tokens=8))
    assert 'pong' in text.lower()
