"""Experiment configuration files.

Flat INI text with one section per component::

    [backbone]
    family = transformer
    n_layers = 4

    [task]
    kind = tokens
    redundancy_stress = true

    [strategy]
    kind = SHERL
    aggregator = MTSA

    [train]
    learning_rate = 0.003
    epochs = 10

An optional ``[pretrain]`` section (same keys as ``[train]``) fits the
backbone on the source domain first, and an optional ``[ablate]`` section
describes a grid for ``sherl ablate``.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .backbones import BackboneSpec
from .errors import ConfigError
from .harness import Experiment, Strategy, TrainConfig
from .mtsa import Insertion
from .tasks import Shift, TaskSpec

REQUIRED = {
    "backbone": ("family",),
    "task": ("kind",),
    "strategy": ("kind",),
    "train": ("learning_rate", "epochs"),
}
SECTIONS = ("backbone", "task", "strategy", "train", "pretrain", "ablate")
SHIFT_KEYS = {"shift_angle": "angle", "shift_remap_labels": "remap_labels", "shift_noise": "noise"}


@dataclass(frozen=True)
class AblateConfig:
    base: Experiment
    grid: tuple[Strategy, ...]
    seeds: tuple[int, ...] = tuple(range(1, 11))


# --------------------------------------------------------------------------
# value conversion

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _convert(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (tuple, frozenset)):
        return _parse_ints(text)
    return text.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, frozenset, list)):
        return ",".join(str(v) for v in sorted(value)) if isinstance(value, frozenset) else ",".join(map(str, value))
    return str(value)


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line of the key in ``text``."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif section and line and line[0] not in "#;" and ("=" in line or ":" in line):
            key = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, lines: dict):
        self.parser = parser
        self.lines = lines

    def fail(self, section: str, key: str | None, message: str):
        field = f"{section}.{key}" if key else section
        raise ConfigError(message, field=field, line=self.lines.get((section, key)))

    def build(self, section: str, cls, extra: dict | None = None, skip=()):
        values = dict(extra or {})
        defaults = _defaults(cls)
        if not self.parser.has_section(section):
            return None
        for key, text in self.parser.items(section):
            if key in skip:
                continue
            if key not in defaults:
                self.fail(section, key, "unknown key")
            try:
                values[key] = _convert(defaults[key], text)
            except ValueError as exc:
                self.fail(section, key, str(exc))
        try:
            return cls(**values)
        except ConfigError as exc:
            key = _blamed_key(str(exc), defaults)
            self.fail(section, key, str(exc))


def _blamed_key(message: str, defaults: dict) -> str | None:
    """First field name mentioned in a validation message."""
    for key in sorted(defaults, key=len, reverse=True):
        if re.search(rf"\b{re.escape(key)}\b", message):
            return key
    return None


def _read_parser(text: str) -> tuple[configparser.ConfigParser, dict]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    lines = _line_numbers(text)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError("unknown section", field=section,
                              line=next((n for (s, _), n in lines.items() if s == section), None))
    for section, keys in REQUIRED.items():
        for key in keys:
            if not parser.has_option(section, key):
                raise ConfigError("required field is missing", field=f"{section}.{key}")
    return parser, lines


def _experiment(parser, lines) -> Experiment:
    r = _Reader(parser, lines)
    weights = parser.get("backbone", "weights", fallback=None)
    backbone = r.build("backbone", BackboneSpec, skip=("weights",))

    shift_vals = {}
    for key, attr in SHIFT_KEYS.items():
        if parser.has_option("task", key):
            try:
                shift_vals[attr] = _convert(_defaults(Shift)[attr], parser.get("task", key))
            except ValueError as exc:
                r.fail("task", key, str(exc))
    task = r.build("task", TaskSpec, extra={"shift": Shift(**shift_vals)}, skip=tuple(SHIFT_KEYS))

    s = dict(parser.items("strategy"))
    unknown = set(s) - {"kind", "aggregator", "insertion", "reduction"}
    if unknown:
        r.fail("strategy", sorted(unknown)[0], "unknown key")
    try:
        strategy = Strategy(s["kind"].strip(), s.get("aggregator", "MTSA").strip(),
                            Insertion.parse(s.get("insertion", "standard")), int(s.get("reduction", 8)))
    except ValueError as exc:
        raise ConfigError(str(exc), field="strategy") from None

    train = r.build("train", TrainConfig)
    pretrain = r.build("pretrain", TrainConfig)
    if backbone.seed != train.seed or task.seed != train.seed:
        # one seed governs the whole run
        backbone = dataclasses.replace(backbone, seed=train.seed)
        task = dataclasses.replace(task, seed=train.seed)
    return Experiment(backbone, task, strategy, train, pretrain, weights.strip() if weights else None)


def parse_experiment(text: str) -> Experiment:
    parser, lines = _read_parser(text)
    return _experiment(parser, lines)


def load_experiment(path: str | Path) -> Experiment:
    return parse_experiment(_read_text(path))


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", field=str(path)) from None


def parse_ablation(text: str) -> AblateConfig:
    """Base experiment plus a grid from the ``[ablate]`` section.

    ``grid`` lists strategies as ``kind`` or ``SHERL:aggregator``; every
    SHERL entry is crossed with ``reductions``.  ``seeds`` is a count.
    """
    parser, lines = _read_parser(text)
    base = _experiment(parser, lines)
    if not parser.has_section("ablate"):
        return AblateConfig(base, (base.strategy,))
    sec = dict(parser.items("ablate"))
    unknown = set(sec) - {"grid", "reductions", "seeds"}
    if unknown:
        _Reader(parser, lines).fail("ablate", sorted(unknown)[0], "unknown key")
    try:
        reductions = _parse_ints(sec["reductions"]) if "reductions" in sec else (base.strategy.reduction,)
        grid = []
        for entry in (e.strip() for e in sec.get("grid", base.strategy.kind).split(",")):
            if not entry:
                continue
            kind, _, agg = entry.partition(":")
            if kind == "SHERL":
                for red in reductions:
                    grid.append(Strategy("SHERL", agg or base.strategy.aggregator,
                                         base.strategy.insertion, red))
            else:
                grid.append(Strategy(kind))
        seeds = tuple(range(1, int(sec.get("seeds", 10)) + 1))
    except ValueError as exc:
        raise ConfigError(str(exc), field="ablate",
                          line=lines.get(("ablate", "grid"))) from None
    if not grid:
        raise ConfigError("grid is empty", field="ablate.grid", line=lines.get(("ablate", "grid")))
    return AblateConfig(base, tuple(grid), seeds)


def load_ablation(path: str | Path) -> AblateConfig:
    return parse_ablation(_read_text(path))


# --------------------------------------------------------------------------
# emitting

def _section(obj, skip=()) -> dict[str, str]:
    return {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}


def experiment_sections(exp: Experiment) -> dict[str, dict[str, str]]:
    backbone = _section(exp.backbone)
    if exp.weights:
        backbone["weights"] = exp.weights
    task = _section(exp.task, skip=("shift",))
    for key, attr in SHIFT_KEYS.items():
        task[key] = _format(getattr(exp.task.shift, attr))
    out = {
        "backbone": backbone,
        "task": task,
        "strategy": {k: str(v) for k, v in exp.strategy.to_dict().items()},
        "train": _section(exp.train),
    }
    if exp.pretrain is not None:
        out["pretrain"] = _section(exp.pretrain)
    return out


def emit_experiment(exp: Experiment) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(experiment_sections(exp))
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser.items(section)]
        lines.append("")
    return "\n".join(lines)


def experiment_to_dict(exp: Experiment) -> dict:
    """JSON-friendly echo; ``experiment_from_dict`` inverts it."""
    return experiment_sections(exp)


def experiment_from_dict(data: dict) -> Experiment:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(data)
    return _experiment(parser, {})
