"""
Prompt template library backed by Jinja2.
Bundled templates live in rectiflow/templates; any of them can be
overridden by a file path from the experiment config.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from jinja2 import Environment, FileSystemLoader, StrictUndefined

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).parent / 'templates'

TEMPLATE_NAMES = (
    'rectifier_math',
    'rectifier_code',
    'feedback',
    'keywords',
    'teacher_math',
    'dedup',
    'selector',
    'agent_user',
)


class PromptLibrary:
    """Renders named templates; overrides map a template name to a file path."""

    def __init__(self, overrides: Optional[Dict[str, Union[str, Path]]] = None):
        self.overrides = {name: Path(path) for name, path in (overrides or {}).items()}
        unknown = set(self.overrides) - set(TEMPLATE_NAMES)
        if unknown:
            raise ValueError(f"unknown template override(s): {', '.join(sorted(unknown))}")
        self._env = Environment(
            loader=FileSystemLoader(str(TEMPLATE_DIR)),
            undefined=StrictUndefined,
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
        )
        self._cache = {}

    def _template(self, name: str):
        if name not in self._cache:
            if name in self.overrides:
                source = self.overrides[name].read_text(encoding='utf-8')
                self._cache[name] = self._env.from_string(source)
                logger.info(f"Using template override for '{name}': {self.overrides[name]}")
            else:
                self._cache[name] = self._env.get_template(f'{name}.txt')
        return self._cache[name]

    def render(self, name: str, **context) -> str:
        return self._template(name).render(**context).strip()

    def rectifier_template(self, domain_tag: str) -> str:
        return 'rectifier_code' if domain_tag == 'code' else 'rectifier_math'


def load_general_indicators() -> Dict[str, Dict[str, str]]:
    with open(TEMPLATE_DIR / 'general_indicators.json', encoding='utf-8') as handle:
        return json.load(handle)


_default_library = None

def get_prompt_library() -> PromptLibrary:
    """Get the shared library with bundled templates only."""
    global _default_library
    if _default_library is None:
        _default_library = PromptLibrary()
    return _default_library
