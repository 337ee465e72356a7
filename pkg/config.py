"""
Configuration settings for the rectify-or-reject multi-agent runtime.
"""
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

class Config:
    """Application configuration class."""

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

    # Generation endpoint (OpenAI-compatible)
    MODEL_API_KEY = os.getenv('MODEL_API_KEY', '')
    MODEL_BASE_URL = os.getenv('MODEL_BASE_URL', 'https://api.openai.com')

    # Embedding endpoint (OpenAI-compatible)
    EMBED_API_KEY = os.getenv('EMBED_API_KEY', '')
    EMBED_BASE_URL = os.getenv('EMBED_BASE_URL', 'https://api.openai.com')

    # HTTP transport
    HTTP_TIMEOUT_SECONDS = float(os.getenv('HTTP_TIMEOUT_SECONDS', '60'))
    HTTP_MAX_RETRIES = 3
    HTTP_RETRY_DELAY_SECONDS = 1.0

    # Rectification defaults
    T_MAX = 3
    K_ACT = 5
    K_DEDUP = 20
    GAMMA = 1
    MAX_CHAT_TURNS = 6
    RESET_BUDGET = 1
    RECTIFIER_TEMPERATURE = 0.0
    AGENT_TEMPERATURE = 0.7
    MAX_TOKENS = 2048
    EMBEDDING_DIM = 8
    EMBEDDING_SEED = 0

    # Live endpoint tests are opt-in
    RUN_LIVE_TESTS = os.getenv('RUN_LIVE_TESTS', 'False').lower() in ('1', 'true', 'yes')
