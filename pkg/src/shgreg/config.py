"""INI-style pipeline configuration.

One section per component. Values are coerced to the type of the matching
dataclass default, and any section or key the dataclasses do not declare is
rejected so that a typo cannot silently fall back to a default.

    [pipeline]
    encoder = runs/encoder.json

    [instopt]
    adam_iters = 30

    [fidelity]
    cmif_weight = 0.1
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .contrastive import BnceConfig
from .instopt import InstOptConfig
from .prealign import PrealignConfig
from .similarity import FidelityConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class ReportConfig:
    overlay: bool = True
    warped: bool = True
    matches_csv: bool = False
    dump_field: bool = False
    # exit with status 1 when the final TRE exceeds this many pixels (0 disables)
    fail_above_tre: float = 0.0


@dataclass
class RunConfig:
    encoder: str = ""
    per_modality_encoders: bool = False


@dataclass
class PipelineConfig:
    pipeline: RunConfig = field(default_factory=RunConfig)
    bnce: BnceConfig = field(default_factory=BnceConfig)
    prealign: PrealignConfig = field(default_factory=PrealignConfig)
    instopt: InstOptConfig = field(default_factory=InstOptConfig)
    fidelity: FidelityConfig = field(default_factory=FidelityConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        # the refinement objective reads its weights from the instopt config
        self.instopt.fidelity = self.fidelity

    def validate(self):
        # fidelity first: instopt validates the same object and would claim its errors
        order = sorted(SECTIONS, key=lambda n: n != "fidelity")
        for name in order:
            sub = getattr(self, name)
            if hasattr(sub, "validate"):
                try:
                    sub.validate()
                except ValueError as e:
                    raise ConfigError(f"[{name}] {e}") from None
        return self

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sub = getattr(self, name)
            out[name] = {f.name: getattr(sub, f.name) for f in _fields(sub)}
        return out


SECTIONS = ("pipeline", "bnce", "prealign", "instopt", "fidelity", "report", "synth")


def _fields(obj):
    # nested dataclass fields (instopt.fidelity) are configured in their own section
    return [f for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))]


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, default, where):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            kinds = [type(v) for v in default]
            if len(set(kinds)) == 1:
                # homogeneous lists may change length; the section's validate() checks it
                kinds = kinds[:1] * len(parts)
            elif len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(k(p) for k, p in zip(kinds, parts))
        return text
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def apply_overrides(cfg, section, values, where="config"):
    """Set ``values`` (a str -> str mapping) on one section of ``cfg``."""
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown section [{section}]")
    sub = getattr(cfg, section)
    known = {f.name for f in _fields(sub)}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        setattr(sub, key, _coerce(raw, getattr(sub, key), f"{where} [{section}] {key}"))


def parse_config(text, where="config"):
    parser = configparser.ConfigParser(interpolation=None, default_section="\0none")
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text, source=where)
    except configparser.Error as e:
        raise ConfigError(f"{where}: {e}") from None
    cfg = PipelineConfig()
    for section in parser.sections():
        apply_overrides(cfg, section, dict(parser.items(section)), where)
    return cfg.validate()


def load_config(path=None):
    """Defaults when ``path`` is None; otherwise parse the file at ``path``."""
    if path is None:
        return PipelineConfig().validate()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return parse_config(text, str(p))
