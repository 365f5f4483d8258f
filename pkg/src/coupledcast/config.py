"""Run configuration: ``key = value`` lines under ``[grid] [toy] [model] [train] [verify]``.

Every key has a default. Unknown sections or keys are rejected, and
``dumps(loads(text))`` reproduces a canonical file exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .csm import CsmConfig
from .toytruth import ToyConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults(cls, skip=()):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


SCHEMA = {
    "grid": {"lats": ToyConfig().lats, "nlon": 32},
    "toy": {**_defaults(ToyConfig, ("lats", "nlon", "operators")),
            "years": 10, "inits_per_year": 52, "horizon": 60, "train_years": 8},
    "model": _defaults(CsmConfig, ("nlat", "nlon")),
    "train": _defaults(TrainConfig, ("seed", "freeze_coupling")),
    "verify": {"alpha": 0.05, "lead_weeks": 6, "extreme_percentile": 90.0,
               "skill_threshold": 0.5},
}


def _parse_value(text, default, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            conv = float if default and isinstance(default[0], float) else int
            return tuple(conv(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    sections: dict = field(default_factory=lambda: {s: dict(v) for s, v in SCHEMA.items()})

    def __getitem__(self, section):
        return self.sections[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.sections == other.sections

    def toy(self):
        g = self["grid"]
        t = {k: v for k, v in self["toy"].items() if k in {f.name for f in fields(ToyConfig)}}
        return ToyConfig(lats=g["lats"], nlon=g["nlon"], **t)

    def model(self, **overrides):
        g = self["grid"]
        return CsmConfig(nlat=len(g["lats"]), nlon=g["nlon"], **{**self["model"], **overrides})

    def train(self, seed=0, freeze_coupling=False):
        return TrainConfig(seed=seed, freeze_coupling=freeze_coupling, **self["train"])


def loads(text):
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            cfg.sections[section][key] = _parse_value(raw, SCHEMA[section][key], f"[{section}] {key}")
    try:
        cfg.toy()
        cfg.model()
        cfg.train()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg):
    lines = []
    for section, keys in SCHEMA.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(cfg.sections[section][key])}")
    return "\n".join(lines) + "\n"


def dump(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(cfg))
