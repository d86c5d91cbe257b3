"""Run configuration: nested dataclasses built from JSON, strict about keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .candidates import CandidateConfig
from .learn.classifier import ClassifierConfig
from .phantom import PhantomConfig

# noise level at which the default phantom classes overlap but stay learnable
DEFAULT_NOISE_SIGMA = 40.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SequencerConfig:
    profile: str = "desk"  # "desk" or "paper"
    desk_factor: int = 8
    psi_init: float = 1.0
    global_psi: bool = False
    discovery_iterations: int = 10
    discovery_patches: int = 48
    chunk: int = 8
    sequence_dtype: str = "float32"  # bulk sequencing precision; discovery always runs in float64

    def __post_init__(self):
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"sequencer.profile: expected 'desk' or 'paper', got {self.profile!r}")
        if self.desk_factor < 1:
            raise ConfigError("sequencer.desk_factor: must be positive")
        if self.sequence_dtype not in ("float32", "float64"):
            raise ConfigError("sequencer.sequence_dtype: expected 'float32' or 'float64'")
        if self.discovery_iterations < 0:
            raise ConfigError("sequencer.discovery_iterations: must be nonnegative")
        if self.discovery_patches < 2:
            raise ConfigError("sequencer.discovery_patches: must be at least 2")


@dataclass(frozen=True)
class Seeds:
    cohort: int = 7
    discovery: int = 7
    folds: int = 7


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(noise_sigma=DEFAULT_NOISE_SIGMA))
    candidates: CandidateConfig = field(default_factory=CandidateConfig)
    sequencer: SequencerConfig = field(default_factory=SequencerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seeds: Seeds = field(default_factory=Seeds)
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads: must be at least 1")
        if self.phantom.seed != self.seeds.cohort:
            object.__setattr__(self, "phantom", dataclasses.replace(self.phantom, seed=self.seeds.cohort))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phantom"].pop("seed")  # carried by seeds.cohort
        return d

    def config_hash(self) -> str:
        """Hash of every setting that can change a result (the worker cap cannot)."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"phantom": PhantomConfig, "candidates": CandidateConfig, "sequencer": SequencerConfig,
             "classifier": ClassifierConfig, "seeds": Seeds}


def _build(cls, values: dict, where: str, base):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is PhantomConfig:
        names.discard("seed")
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return dataclasses.replace(base, **values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay ``doc`` on ``base`` (defaults if omitted); unknown keys raise :class:`ConfigError`."""
    base = base or RunConfig()
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"threads"})
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}")
    kw = {}
    for name in _SECTIONS:
        if name in doc:
            kw[name] = _build(_SECTIONS[name], doc[name], name, getattr(base, name))
    if "threads" in doc:
        kw["threads"] = doc["threads"]
    if "seeds" in kw:
        kw["phantom"] = dataclasses.replace(kw.get("phantom", base.phantom), seed=kw["seeds"].cohort)
    try:
        return dataclasses.replace(base, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> tuple[RunConfig, str]:
    """Config from a JSON file plus the file's verbatim text."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc), text


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, seeds=Seeds(seed, seed, seed),
                               phantom=dataclasses.replace(cfg.phantom, seed=seed))
