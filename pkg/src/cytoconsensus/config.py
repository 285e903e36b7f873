"""Pipeline configuration file (YAML or JSON).

Recognised top-level keys::

    endpoints:        list of endpoint mappings (id, base_url, model_name, api_key_env,
                      max_in_flight, requests_per_minute, timeout, max_retries,
                      retry_backoff_base)
    annotators:       list of endpoint ids queried in Stage 1
    integrator:       endpoint id that writes the fused paragraph (optional)
    expert:           endpoint id used for Stage 3 (optional)
    generator:        endpoint id used for replay generation (optional)
    eval_model:       endpoint id evaluated by ``eval`` (optional)
    lexicon:          path of a lexicon file (optional, default lexicon otherwise)
    prompts:          inline prompt templates keyed by name
    prompt_files:     prompt template paths keyed by name (override ``prompts``)
    fusion:           {min_coverage, min_votes, confidence_weighting}
    request:          {temperature, max_output_tokens, seed}
    shard_size:       records per shard (default 1000)
    concurrency:      tiles processed concurrently (default 4)
    output_dir:       dataset directory for ``annotate``

Relative paths resolve against the config file's directory. API keys are read
only from the environment variables named by ``api_key_env``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .endpoints import EndpointConfig
from .exceptions import ConfigInvalid, LexiconError
from .fusion import DEFAULT_INTEGRATOR_PROMPT, FusionPolicy
from .refine import DEFAULT_EXPERT_PROMPT
from .schema import Lexicon, MorphDimension, default_lexicon
from .tiles import canonical_hash

DEFAULT_ANNOTATOR_SYSTEM = "You are an assistant that describes cervical cytology image tiles for a cytopathologist."

DEFAULT_ANNOTATOR_USER = """Describe the cell morphology visible in this cervical cytology image tile.
Address each of the following observations explicitly, stating which option applies:
{dimension_list}
Finish with a short overall summary."""

DEFAULT_PROMPTS = {
    "annotator_system": DEFAULT_ANNOTATOR_SYSTEM,
    "annotator_user": DEFAULT_ANNOTATOR_USER,
    "integrator": DEFAULT_INTEGRATOR_PROMPT,
    "expert": DEFAULT_EXPERT_PROMPT,
}

_KNOWN_KEYS = {
    "endpoints", "annotators", "integrator", "expert", "generator", "eval_model", "lexicon",
    "prompts", "prompt_files", "fusion", "request", "shard_size", "concurrency", "output_dir",
}


def dimension_list() -> str:
    return "\n".join(f"- {d.display_name}: {d.positive_label} or {d.negative_label}" for d in MorphDimension)


@dataclass
class PipelineConfig:
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    annotators: list[EndpointConfig] = field(default_factory=list)
    integrator: EndpointConfig | None = None
    expert: EndpointConfig | None = None
    generator: EndpointConfig | None = None
    eval_model: EndpointConfig | None = None
    lexicon: Lexicon = field(default_factory=default_lexicon)
    prompts: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROMPTS))
    policy: FusionPolicy = field(default_factory=FusionPolicy)
    request_options: dict[str, Any] = field(default_factory=dict)
    shard_size: int = 1000
    concurrency: int = 4
    output_dir: Path | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.shard_size < 1:
            raise ConfigInvalid("shard_size must be >= 1")
        if self.concurrency < 1:
            raise ConfigInvalid("concurrency must be >= 1")

    def config_hash(self) -> str:
        """Content hash of prompts, lexicon, fusion policy and endpoint model names."""
        return canonical_hash(
            {
                "prompts": self.prompts,
                "lexicon": self.lexicon.dumps(),
                "policy": self.policy.to_dict(),
                "annotators": [ep.model_name for ep in self.annotators],
                "integrator": self.integrator.model_name if self.integrator else None,
                "expert": self.expert.model_name if self.expert else None,
            }
        )

    def endpoint(self, endpoint_id: str) -> EndpointConfig:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise ConfigInvalid(f"unknown endpoint id {endpoint_id!r}") from None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path | None = None) -> "PipelineConfig":
        if not isinstance(data, Mapping):
            raise ConfigInvalid("config must be a mapping")
        unknown = set(data) - _KNOWN_KEYS
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()

        endpoints: dict[str, EndpointConfig] = {}
        for raw in data.get("endpoints") or []:
            ep = EndpointConfig.from_dict(raw)
            if ep.id in endpoints:
                raise ConfigInvalid(f"duplicate endpoint id {ep.id!r}")
            endpoints[ep.id] = ep

        def pick(key: str) -> EndpointConfig | None:
            eid = data.get(key)
            if eid is None:
                return None
            if eid not in endpoints:
                raise ConfigInvalid(f"{key}: unknown endpoint id {eid!r}")
            return endpoints[eid]

        annotators = []
        for eid in data.get("annotators") or []:
            if eid not in endpoints:
                raise ConfigInvalid(f"annotators: unknown endpoint id {eid!r}")
            annotators.append(endpoints[eid])
        if len({a.id for a in annotators}) != len(annotators):
            raise ConfigInvalid("annotators: endpoint listed twice")

        lexicon = default_lexicon()
        if data.get("lexicon"):
            try:
                lexicon = Lexicon.load(_resolve(base, data["lexicon"]))
            except (OSError, LexiconError) as exc:
                raise ConfigInvalid(f"lexicon: {exc}") from exc

        prompts = dict(DEFAULT_PROMPTS)
        prompts.update({k: str(v) for k, v in (data.get("prompts") or {}).items()})
        for name, rel in (data.get("prompt_files") or {}).items():
            path = _resolve(base, rel)
            try:
                prompts[name] = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigInvalid(f"prompt file {path}: {exc.strerror or exc}") from exc

        integrator = pick("integrator")
        request = dict(data.get("request") or {})
        unknown_req = set(request) - {"temperature", "max_output_tokens", "seed"}
        if unknown_req:
            raise ConfigInvalid(f"request: unknown keys {sorted(unknown_req)}")
        try:
            return cls(
                endpoints=endpoints,
                annotators=annotators,
                integrator=integrator,
                expert=pick("expert"),
                generator=pick("generator"),
                eval_model=pick("eval_model"),
                lexicon=lexicon,
                prompts=prompts,
                policy=FusionPolicy.from_dict(data.get("fusion"), integrator),
                request_options=request,
                shard_size=int(data.get("shard_size", 1000)),
                concurrency=int(data.get("concurrency", 4)),
                output_dir=_resolve(base, data["output_dir"]) if data.get("output_dir") else None,
                base_dir=base,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc


def _resolve(base: Path, value: str | Path) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config file {path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: invalid YAML: {exc}") from None
    return PipelineConfig.from_dict(data, base_dir=path.parent)
