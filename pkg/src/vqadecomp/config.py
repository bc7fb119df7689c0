"""Pipeline configuration: YAML file, environment overrides, and a secret-free digest."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .gateway import ConfigError, EndpointConfig

ROLES = ("grounder", "subject", "judge")
ENV_PREFIX = "VQADECOMP"
_ENDPOINT_KEYS = {
    "base_url",
    "model",
    "api_key",
    "api_key_env",
    "require_key",
    "timeout",
    "max_retries",
    "backoff_base",
    "backoff_max",
    "image_mode",
    "max_images",
    "temperature",
    "max_tokens",
}
_TOP_KEYS = {
    "dataset",
    "k",
    "timestamp_cap",
    "predicates",
    "synonyms",
    "grounding",
    "endpoints",
    "max_in_flight",
    "cache_dir",
    "strict",
    "star_threshold",
}


@dataclass
class RoleEndpoint:
    endpoint: EndpointConfig
    temperature: float = 0.0
    max_tokens: int | None = None


@dataclass
class PipelineConfig:
    source: str = "nextqa"
    splits: dict[str, Path] = field(default_factory=dict)
    annotations: Path | None = None
    video_map: Path | None = None
    frames: Path | None = None
    k: int = 64
    timestamp_cap: int = 16
    predicates: Path | None = None
    synonyms: Path | None = None
    grounding: str = "lexical"
    endpoints: dict[str, RoleEndpoint] = field(default_factory=dict)
    max_in_flight: int = 8
    cache_dir: Path | None = None
    strict: bool = False
    star_threshold: int = 4
    digest: str = ""

    def model_id(self, role: str) -> str:
        try:
            return self.endpoints[role].endpoint.model
        except KeyError:
            raise ConfigError(f"no endpoint configured for role {role!r}") from None

    def gateway_endpoints(self, roles=ROLES) -> dict[str, EndpointConfig]:
        out: dict[str, EndpointConfig] = {}
        for role in roles:
            if role not in self.endpoints:
                continue
            ep = self.endpoints[role].endpoint
            if ep.model in out and out[ep.model] != ep:
                raise ConfigError(f"model {ep.model!r} is configured twice with different endpoints")
            out[ep.model] = ep
        return out


def _redact(doc: Any) -> Any:
    if isinstance(doc, Mapping):
        return {k: _redact(v) for k, v in doc.items() if k != "api_key"}
    if isinstance(doc, list):
        return [_redact(v) for v in doc]
    return doc


def config_digest(doc: Mapping) -> str:
    """sha256 over the canonical JSON of the config, with API keys removed."""
    blob = json.dumps(_redact(doc), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def apply_env(doc: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Overlay ``VQADECOMP_<ROLE>_{BASE_URL,MODEL,API_KEY}`` onto the endpoint sections."""
    environ = os.environ if environ is None else environ
    doc = copy.deepcopy(doc)
    endpoints = doc.setdefault("endpoints", {}) or {}
    doc["endpoints"] = endpoints
    for role in ROLES:
        for key in ("base_url", "model"):
            value = environ.get(f"{ENV_PREFIX}_{role.upper()}_{key.upper()}")
            if value:
                endpoints.setdefault(role, {})[key] = value
    return doc


def _path(base: Path, value) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(os.path.expanduser(str(value)))
    return p if p.is_absolute() else base / p


def _endpoint(role: str, raw: Mapping) -> RoleEndpoint:
    unknown = set(raw) - _ENDPOINT_KEYS
    if unknown:
        raise ConfigError(f"endpoints.{role}: unknown key(s) {sorted(unknown)}")
    if not raw.get("base_url") or not raw.get("model"):
        raise ConfigError(f"endpoints.{role} needs base_url and model")
    kw = {k: raw[k] for k in _ENDPOINT_KEYS - {"temperature", "max_tokens"} if k in raw}
    kw.setdefault("api_key_env", f"{ENV_PREFIX}_{role.upper()}_API_KEY")
    return RoleEndpoint(EndpointConfig(**kw), float(raw.get("temperature", 0.0)), raw.get("max_tokens"))


def from_dict(doc: Mapping, base_dir: str | Path = ".", environ: Mapping[str, str] | None = None) -> PipelineConfig:
    """Build a config; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    doc = apply_env(dict(doc or {}), environ)
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
    ds = doc.get("dataset") or {}
    source = ds.get("source", "nextqa")
    if source not in ("nextqa", "star"):
        raise ConfigError(f"dataset.source must be nextqa or star, got {source!r}")
    splits = ds.get("splits") or {}
    if not isinstance(splits, Mapping):
        raise ConfigError("dataset.splits must map split names to files")
    grounding = doc.get("grounding", "star_direct" if source == "star" else "lexical")
    if grounding not in ("star_direct", "llm", "lexical"):
        raise ConfigError(f"grounding must be star_direct, llm or lexical, got {grounding!r}")
    k = int(doc.get("k", 64))
    cap = int(doc.get("timestamp_cap", 16))
    in_flight = int(doc.get("max_in_flight", 8))
    if k < 1 or cap < 1 or in_flight < 1:
        raise ConfigError("k, timestamp_cap and max_in_flight must be positive")
    endpoints = {role: _endpoint(role, raw) for role, raw in (doc.get("endpoints") or {}).items()}
    bad_roles = set(endpoints) - set(ROLES)
    if bad_roles:
        raise ConfigError(f"unknown endpoint role(s) {sorted(bad_roles)}")
    return PipelineConfig(
        source=source,
        splits={str(name): _path(base, p) for name, p in splits.items()},
        annotations=_path(base, ds.get("annotations")),
        video_map=_path(base, ds.get("video_map")),
        frames=_path(base, ds.get("frames")),
        k=k,
        timestamp_cap=cap,
        predicates=_path(base, doc.get("predicates")),
        synonyms=_path(base, doc.get("synonyms")),
        grounding=grounding,
        endpoints=endpoints,
        max_in_flight=in_flight,
        cache_dir=_path(base, doc.get("cache_dir")),
        strict=bool(doc.get("strict", False)),
        star_threshold=int(doc.get("star_threshold", 4)),
        digest=config_digest(doc),
    )


def load_config(path: str | Path, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text("utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(doc, path.parent, environ)
