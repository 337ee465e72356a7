#!/usr/bin/env python3
"""
Experiment configuration manager.
Parses the INI experiment file into run knobs, roster, routing policy and
backend bindings, and builds the backend registry from it.
"""

import configparser
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config import Config
from rectiflow.api_client import OpenAIChatBackend, OpenAICompatibleClient, OpenAIEmbeddingBackend
from rectiflow.backends import (
    BackendRegistry,
    GenerationService,
    RecordingBackend,
    RecordingEmbedder,
    ReplayBackend,
    ReplayEmbedder,
    ScriptedBackend,
    ScriptedEmbedder,
    load_script_file,
)
from rectiflow.domain import AgentSpec, ConfigurationError, RoleSpec, RunConfig, SamplingParams
from rectiflow.prompts import TEMPLATE_NAMES, PromptLibrary
from rectiflow.runtime import RoutingPolicy, ScriptedRouting, SelectorRouting, validate_roster

logger = logging.getLogger(__name__)

BACKEND_KINDS = ('scripted', 'replay', 'openai')
EMBEDDING_KINDS = ('scripted', 'replay', 'openai')

# section -> {key: (RunConfig field or None, type)}
_SECTION_KEYS = {
    'run': {
        'jobs': (None, int),
        'seed': ('seed', int),
        'domain_tag': ('domain_tag', str),
        'max_tokens': ('max_tokens', int),
        'agent_temperature': ('agent_temperature', float),
    },
    'gate': {
        't_max': ('t_max', int),
        'k_act': ('k_act', int),
        'gamma': ('gamma', int),
        'max_chat_turns': ('max_chat_turns', int),
        'reset_budget': ('reset_budget', int),
        'zero_shot': ('zero_shot', bool),
        'scrutiny': ('scrutiny_enabled', bool),
        'retrieval': ('retrieval_mode', str),
        'fail_closed': ('fail_closed', bool),
        'max_parallel_checks': ('max_parallel_checks', int),
        'rectifier_backend': ('rectifier_backend_id', str),
        'rectifier_temperature': ('rectifier_temperature', float),
        'pool': (None, str),
    },
    'miner': {
        'k_dedup': ('k_dedup', int),
        'dedup': ('dedup_enabled', bool),
        'teacher_backend': ('teacher_backend_id', str),
        'dedup_backend': ('dedup_backend_id', str),
        'mine_decision_agent': ('mine_decision_agent', bool),
    },
    'embedding': {
        'kind': (None, str),
        'dimension': ('embedding_dim', int),
        'seed': (None, int),
        'model': (None, str),
        'base_url': (None, str),
        'transcript': (None, str),
        'record': (None, str),
    },
    'routing': {
        'mode': (None, str),
        'sequence': (None, str),
        'backend': (None, str),
        'template': (None, str),
        'temperature': (None, float),
    },
}
_BACKEND_KEYS = {'kind', 'fixtures', 'transcript', 'record', 'model', 'base_url', 'api_key_env', 'extra_body'}
_AGENT_KEYS = {'backend', 'instructions', 'instructions_file', 'temperature', 'max_tokens', 'decision'}


@dataclass(frozen=True)
class BackendSpec:
    backend_id: str
    kind: str
    options: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = 'scripted'
    dimension: int = Config.EMBEDDING_DIM
    seed: int = Config.EMBEDDING_SEED
    model: Optional[str] = None
    base_url: Optional[str] = None
    transcript: Optional[str] = None
    record: Optional[str] = None


@dataclass
class ExperimentConfig:
    """Everything one invocation needs, defaults resolved."""
    run: RunConfig
    roster: List[AgentSpec]
    routing: RoutingPolicy
    backends: Dict[str, BackendSpec]
    embedding: EmbeddingSpec
    prompt_overrides: Dict[str, Path] = field(default_factory=dict)
    pool_path: Optional[Path] = None
    jobs: int = 1
    source_path: Optional[Path] = None

    def prompt_library(self) -> PromptLibrary:
        return PromptLibrary(self.prompt_overrides)


class ExperimentConfigLoader:
    """Reads one INI file, collecting every field-level issue before failing."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.base_dir = self.path.parent
        self.issues: List[str] = []
        self._parser = configparser.ConfigParser(interpolation=None)
        self._parser.optionxform = str  # keep agent/backend key case
        logger.debug(f"ExperimentConfigLoader initialized for {self.path}")

    def _load_default_config(self) -> Dict[str, Dict[str, Any]]:
        """Defaults for every scalar key, taken from RunConfig and Config."""
        run = RunConfig()
        defaults = {}
        for section, keys in _SECTION_KEYS.items():
            defaults[section] = {key: getattr(run, attr) for key, (attr, _) in keys.items() if attr}
        defaults['run']['jobs'] = 1
        defaults['embedding'].update({'kind': 'scripted', 'seed': Config.EMBEDDING_SEED})
        defaults['routing'].update({'mode': 'scripted', 'template': 'selector', 'temperature': 0.0})
        return defaults

    def _resolve_path(self, value: str) -> Path:
        path = Path(value).expanduser()
        return path if path.is_absolute() else (self.base_dir / path)

    def _convert(self, location: str, raw: str, kind: type):
        try:
            if kind is bool:
                lowered = raw.strip().lower()
                if lowered in ('1', 'true', 'yes', 'on'):
                    return True
                if lowered in ('0', 'false', 'no', 'off'):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            return kind(raw.strip())
        except ValueError as e:
            self.issues.append(f"{location}: {e}")
            return None

    def _read_scalars(self) -> Dict[str, Dict[str, Any]]:
        values = self._load_default_config()
        for section, keys in _SECTION_KEYS.items():
            if not self._parser.has_section(section):
                continue
            for key, raw in self._parser.items(section):
                if key not in keys:
                    self.issues.append(f"{section}.{key}: unknown key")
                    continue
                value = self._convert(f"{section}.{key}", raw, keys[key][1])
                if value is not None:
                    values[section][key] = value
        return values

    def _run_config(self, values, overrides: Dict[str, Any]) -> Optional[RunConfig]:
        kwargs = {}
        for section, keys in _SECTION_KEYS.items():
            for key, (attr, _) in keys.items():
                if attr and key in values[section]:
                    kwargs[attr] = values[section][key]
        if overrides.get('seed') is not None:
            kwargs['seed'] = overrides['seed']
        try:
            return RunConfig(**kwargs)
        except (TypeError, ValueError) as e:
            self.issues.extend(f"run config: {problem}" for problem in str(e).split('; '))
            return None

    def _backends(self) -> Dict[str, BackendSpec]:
        backends = {}
        for section in self._parser.sections():
            if not section.startswith('backend.'):
                continue
            backend_id = section[len('backend.'):]
            options = dict(self._parser.items(section))
            for key in sorted(set(options) - _BACKEND_KEYS):
                self.issues.append(f"{section}.{key}: unknown key")
            kind = options.get('kind', '')
            if kind not in BACKEND_KINDS:
                self.issues.append(f"{section}.kind: must be one of {', '.join(BACKEND_KINDS)}, got '{kind}'")
                continue
            required = {'scripted': 'fixtures', 'replay': 'transcript', 'openai': 'model'}[kind]
            if not options.get(required):
                self.issues.append(f"{section}.{required}: required for kind '{kind}'")
            for key in ('fixtures', 'transcript'):
                if options.get(key):
                    path = self._resolve_path(options[key])
                    if not path.exists():
                        self.issues.append(f"{section}.{key}: file not found: {path}")
                    options[key] = str(path)
            if options.get('record'):
                options['record'] = str(self._resolve_path(options['record']))
            if options.get('extra_body'):
                try:
                    if not isinstance(json.loads(options['extra_body']), dict):
                        raise ValueError("expected a JSON object")
                except ValueError as e:
                    self.issues.append(f"{section}.extra_body: {e}")
            backends[backend_id] = BackendSpec(backend_id, kind, options)
        return backends

    def _roster(self, run: Optional[RunConfig]) -> List[AgentSpec]:
        roster = []
        temperature = run.agent_temperature if run else Config.AGENT_TEMPERATURE
        max_tokens = run.max_tokens if run else Config.MAX_TOKENS
        for section in self._parser.sections():
            if not section.startswith('agent.'):
                continue
            name = section[len('agent.'):]
            options = dict(self._parser.items(section))
            for key in sorted(set(options) - _AGENT_KEYS):
                self.issues.append(f"{section}.{key}: unknown key")

            instructions = options.get('instructions', '')
            if options.get('instructions_file'):
                path = self._resolve_path(options['instructions_file'])
                try:
                    instructions = path.read_text(encoding='utf-8').strip()
                except OSError as e:
                    self.issues.append(f"{section}.instructions_file: {e}")
            if not instructions:
                self.issues.append(f"{section}.instructions: required")
            if not options.get('backend'):
                self.issues.append(f"{section}.backend: required")
                continue

            agent_temperature = temperature
            if 'temperature' in options:
                agent_temperature = self._convert(f"{section}.temperature", options['temperature'], float)
            agent_tokens = max_tokens
            if 'max_tokens' in options:
                agent_tokens = self._convert(f"{section}.max_tokens", options['max_tokens'], int)
            decision = self._convert(f"{section}.decision", options.get('decision', 'false'), bool)
            try:
                sampling = SamplingParams(agent_temperature, agent_tokens)
            except (TypeError, ValueError) as e:
                self.issues.append(f"{section}: {e}")
                continue
            roster.append(AgentSpec(RoleSpec(name, instructions), options['backend'], sampling, bool(decision)))
        return roster

    def _routing(self, values) -> Optional[RoutingPolicy]:
        routing = values['routing']
        mode = routing.get('mode')
        if mode == 'scripted':
            sequence = tuple(s.strip() for s in routing.get('sequence', '').split(',') if s.strip())
            if not sequence:
                self.issues.append("routing.sequence: required for scripted routing")
                return None
            return ScriptedRouting(sequence)
        if mode == 'selector':
            if not routing.get('backend'):
                self.issues.append("routing.backend: required for selector routing")
                return None
            return SelectorRouting(routing['backend'], routing.get('template', 'selector'),
                                   routing.get('temperature', 0.0))
        self.issues.append(f"routing.mode: must be 'scripted' or 'selector', got '{mode}'")
        return None

    def _prompt_overrides(self) -> Dict[str, Path]:
        overrides = {}
        if self._parser.has_section('prompts'):
            for name, raw in self._parser.items('prompts'):
                if name not in TEMPLATE_NAMES:
                    self.issues.append(f"prompts.{name}: unknown template (known: {', '.join(TEMPLATE_NAMES)})")
                    continue
                path = self._resolve_path(raw)
                if not path.exists():
                    self.issues.append(f"prompts.{name}: file not found: {path}")
                overrides[name] = path
        return overrides

    def load(self, overrides: Dict[str, Any] = None) -> ExperimentConfig:
        overrides = overrides or {}
        if not self.path.exists():
            raise ConfigurationError(f"config file not found: {self.path}")
        try:
            self._parser.read(self.path, encoding='utf-8')
        except configparser.Error as e:
            raise ConfigurationError(f"{self.path}: {e}") from e

        known_sections = set(_SECTION_KEYS) | {'prompts'}
        for section in self._parser.sections():
            if section not in known_sections and not section.startswith(('backend.', 'agent.')):
                self.issues.append(f"[{section}]: unknown section")

        values = self._read_scalars()
        run = self._run_config(values, overrides)
        backends = self._backends()
        roster = self._roster(run)
        routing = self._routing(values)
        prompt_overrides = self._prompt_overrides()

        embed = values['embedding']
        if embed.get('kind') not in EMBEDDING_KINDS:
            self.issues.append(f"embedding.kind: must be one of {', '.join(EMBEDDING_KINDS)}, got '{embed.get('kind')}'")
        if embed.get('kind') == 'openai' and not embed.get('model'):
            self.issues.append("embedding.model: required for kind 'openai'")
        transcript = self._resolve_path(embed['transcript']) if embed.get('transcript') else None
        if embed.get('kind') == 'replay':
            if transcript is None:
                self.issues.append("embedding.transcript: required for kind 'replay'")
            elif not transcript.exists():
                self.issues.append(f"embedding.transcript: file not found: {transcript}")
        record = self._resolve_path(embed['record']) if embed.get('record') else None
        embedding_seed = overrides.get('seed') if overrides.get('seed') is not None else embed.get('seed')
        embedding = EmbeddingSpec(
            kind=embed.get('kind', 'scripted'),
            dimension=run.embedding_dim if run else Config.EMBEDDING_DIM,
            seed=embedding_seed,
            model=embed.get('model'),
            base_url=embed.get('base_url'),
            transcript=str(transcript) if transcript else None,
            record=str(record) if record else None,
        )

        if routing is not None:
            for issue in validate_roster(roster, routing):
                self.issues.append(issue)
            referenced = {spec.backend_id for spec in roster}
            if isinstance(routing, SelectorRouting):
                referenced.add(routing.backend_id)
            for backend_id in sorted(referenced - set(backends)):
                self.issues.append(f"backend '{backend_id}' is referenced but has no [backend.{backend_id}] section")

        if run is not None and run.scrutiny_enabled and run.rectifier_backend_id not in backends:
            self.issues.append(f"gate.rectifier_backend: no [backend.{run.rectifier_backend_id}] section")

        jobs = overrides.get('jobs') or values['run'].get('jobs', 1)
        if jobs < 1:
            self.issues.append("run.jobs: must be >= 1")
        pool_path = self._resolve_path(values['gate']['pool']) if values['gate'].get('pool') else None

        if self.issues:
            logger.error(f"Invalid experiment config {self.path}: {len(self.issues)} issue(s)")
            raise ConfigurationError(self.issues)

        logger.info(f"Loaded experiment config {self.path}: {len(roster)} agents, {len(backends)} backends")
        return ExperimentConfig(
            run=run, roster=roster, routing=routing, backends=backends, embedding=embedding,
            prompt_overrides=prompt_overrides, pool_path=pool_path, jobs=jobs, source_path=self.path,
        )


def load_experiment_config(path: Union[str, Path], seed: int = None, jobs: int = None) -> ExperimentConfig:
    return ExperimentConfigLoader(path).load({'seed': seed, 'jobs': jobs})


def _openai_client(options: Dict[str, str], default_url: str, default_key: str) -> OpenAICompatibleClient:
    api_key = os.getenv(options['api_key_env'], '') if options.get('api_key_env') else default_key
    if not api_key:
        raise ConfigurationError(f"no API key available for endpoint {options.get('base_url') or default_url}")
    return OpenAICompatibleClient(options.get('base_url') or default_url, api_key)


def _build_generator(spec: BackendSpec, script_cache: Dict[str, Dict[str, ScriptedBackend]]) -> GenerationService:
    options = spec.options
    if spec.kind == 'scripted':
        path = options['fixtures']
        if path not in script_cache:
            script_cache[path] = load_script_file(path)
        backend = script_cache[path].get(spec.backend_id)
        if backend is None:
            logger.warning(f"Fixture file {path} has no records for backend '{spec.backend_id}'")
            backend = ScriptedBackend(spec.backend_id)
    elif spec.kind == 'replay':
        backend = ReplayBackend.from_transcript(spec.backend_id, options['transcript'])
    else:
        extra_body = json.loads(options['extra_body']) if options.get('extra_body') else None
        client = _openai_client(options, Config.MODEL_BASE_URL, Config.MODEL_API_KEY)
        backend = OpenAIChatBackend(options['model'], client, extra_body)

    if options.get('record'):
        logger.info(f"Recording backend '{spec.backend_id}' to {options['record']}")
        return RecordingBackend(spec.backend_id, backend, options['record'])
    return backend


def build_registry(experiment: ExperimentConfig) -> BackendRegistry:
    """Instantiate every configured backend plus the embedder."""
    script_cache: Dict[str, Dict[str, ScriptedBackend]] = {}
    generators = {backend_id: _build_generator(spec, script_cache)
                  for backend_id, spec in experiment.backends.items()}

    embedding = experiment.embedding
    if embedding.kind == 'openai':
        client = _openai_client({'base_url': embedding.base_url}, Config.EMBED_BASE_URL, Config.EMBED_API_KEY)
        embedder = OpenAIEmbeddingBackend(embedding.model, embedding.dimension, client)
    elif embedding.kind == 'replay':
        embedder = ReplayEmbedder.from_transcript(embedding.transcript, embedding.dimension)
    else:
        embedder = ScriptedEmbedder(embedding.dimension, embedding.seed)
    if embedding.record:
        logger.info(f"Recording embeddings to {embedding.record}")
        embedder = RecordingEmbedder(embedder, embedding.record)
    logger.info(f"Backend registry ready: {', '.join(sorted(generators))} (embedding {embedding.kind}, "
                f"D={embedding.dimension})")
    return BackendRegistry(generators, embedder)


def effective_config(experiment: ExperimentConfig) -> configparser.ConfigParser:
    """The defaults-resolved configuration as an INI document."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    run = experiment.run

    def fmt(value) -> str:
        if isinstance(value, bool):
            return 'true' if value else 'false'
        return str(value)

    for section, keys in _SECTION_KEYS.items():
        parser.add_section(section)
        for key, (attr, _) in keys.items():
            if attr:
                parser.set(section, key, fmt(getattr(run, attr)))
    parser.set('run', 'jobs', fmt(experiment.jobs))
    if experiment.pool_path:
        parser.set('gate', 'pool', str(experiment.pool_path))

    embedding = experiment.embedding
    parser.set('embedding', 'kind', embedding.kind)
    parser.set('embedding', 'seed', fmt(embedding.seed))
    for key in ('model', 'base_url', 'transcript', 'record'):
        if getattr(embedding, key):
            parser.set('embedding', key, getattr(embedding, key))

    routing = experiment.routing
    if isinstance(routing, ScriptedRouting):
        parser.set('routing', 'mode', 'scripted')
        parser.set('routing', 'sequence', ', '.join(routing.sequence))
    else:
        parser.set('routing', 'mode', 'selector')
        parser.set('routing', 'backend', routing.backend_id)
        parser.set('routing', 'template', routing.template)
        parser.set('routing', 'temperature', fmt(routing.temperature))

    for backend_id, spec in sorted(experiment.backends.items()):
        section = f'backend.{backend_id}'
        parser.add_section(section)
        parser.set(section, 'kind', spec.kind)
        for key, value in sorted(spec.options.items()):
            if key != 'kind':
                parser.set(section, key, value)

    for agent in experiment.roster:
        section = f'agent.{agent.role.name}'
        parser.add_section(section)
        parser.set(section, 'backend', agent.backend_id)
        parser.set(section, 'decision', fmt(agent.is_decision))
        parser.set(section, 'temperature', fmt(agent.sampling.temperature))
        parser.set(section, 'max_tokens', fmt(agent.sampling.max_tokens))
        parser.set(section, 'instructions', agent.role.instructions)

    if experiment.prompt_overrides:
        parser.add_section('prompts')
        for name, path in sorted(experiment.prompt_overrides.items()):
            parser.set('prompts', name, str(path))
    return parser


def write_effective_config(experiment: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        effective_config(experiment).write(handle)
    logger.debug(f"Effective config written to {path}")
    return path
