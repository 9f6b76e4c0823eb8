"""Memory ledger, gradient-flow audit and aggregation FLOP counts.

Memory is read from the tape's retained-buffer registry, so the numbers are
exact byte counts of what a backward pass keeps alive rather than process
RSS.  Origins beginning with ``backbone`` are backbone activations, ``mtsa``
the adapter and ``head`` the classifier.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autograph import Tape, Tensor
from .errors import AuditError
from .mtsa import MtsaConfig


def origin_group(origin: str) -> str:
    for prefix in ("backbone", "mtsa", "head"):
        if origin.startswith(prefix):
            return prefix
    return "other"


@dataclass
class MemoryLedger:
    by_origin: dict[str, int]
    backbone_retained: int
    adapter_retained: int
    head_retained: int
    other_retained: int
    trainable_param_bytes: int = 0
    frozen_param_bytes: int = 0

    @property
    def total_retained(self) -> int:
        return self.backbone_retained + self.adapter_retained + self.head_retained + self.other_retained

    def backbone_layers(self) -> list[str]:
        """Backbone layer origins holding at least one retained buffer."""
        return sorted(o for o, b in self.by_origin.items()
                      if b > 0 and o.startswith("backbone") and "layer" in o)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["total_retained"] = self.total_retained
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "MemoryLedger":
        data = dict(data)
        data.pop("total_retained", None)
        return cls(**data)


def _param_bytes(tensors: Iterable[Tensor]) -> int:
    seen, total = set(), 0
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            total += t.data.nbytes
    return total


def audit_memory(tape: Tape, trainable: Iterable[Tensor] = (),
                 frozen: Iterable[Tensor] = ()) -> MemoryLedger:
    by_origin = dict(sorted(tape.retained_bytes_by_origin.items()))
    groups = Counter()
    for origin, nbytes in by_origin.items():
        groups[origin_group(origin)] += nbytes
    return MemoryLedger(by_origin, groups["backbone"], groups["mtsa"], groups["head"],
                        groups["other"], _param_bytes(trainable), _param_bytes(frozen))


@dataclass
class GradientAudit:
    params_with_grad: list[str]
    params_without_grad: list[str]
    inputs_with_grad: list[str]
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "GradientAudit":
        data = dict(data)
        data.pop("passed", None)
        return cls(**data)

    def merge(self, other: "GradientAudit") -> "GradientAudit":
        with_grad = sorted(set(self.params_with_grad) | set(other.params_with_grad))
        without = sorted((set(self.params_without_grad) | set(other.params_without_grad)) - set(with_grad))
        return GradientAudit(with_grad, without,
                             sorted(set(self.inputs_with_grad) | set(other.inputs_with_grad)),
                             sorted(set(self.violations) | set(other.violations)))


def audit_gradients(grads: Mapping[Tensor, np.ndarray], registry: Mapping[str, Tensor],
                    frozen: Iterable[str] = (), inputs: Mapping[str, Tensor] | None = None,
                    raise_on_violation: bool = True) -> GradientAudit:
    """Classify every registered parameter by whether it received a gradient.

    ``frozen`` names parameters that must not receive one; ``inputs`` are
    detached tensors (hidden states, data) that must never receive one.
    """
    frozen = set(frozen)
    with_grad, without, violations = [], [], []
    for name, t in registry.items():
        if t in grads:
            with_grad.append(name)
            if name in frozen:
                violations.append(f"frozen parameter {name} received a gradient")
        else:
            without.append(name)
    inputs_with_grad = [name for name, t in (inputs or {}).items() if t in grads or t.requires_grad]
    violations += [f"detached input {name} is attached to the gradient graph" for name in inputs_with_grad]
    audit = GradientAudit(sorted(with_grad), sorted(without), sorted(inputs_with_grad), violations)
    if violations and raise_on_violation:
        raise AuditError(violations[0])
    return audit


# --------------------------------------------------------------------------
# FLOPs

# Multiplications and divisions per token of the aggregation kernel, with
# M = N - 1 early rows of width d:
#   row l2 norms    M*d squares + M*d divisions
#   cosine matrix   M*M*d
#   guidance scores M*d
#   rate division   M
#   l1 division     M
#   weighted sum    M*d
def aggregation_constants(hidden_dim: int) -> tuple[int, int]:
    """Coefficients (a, b) of the per-token count a*M**2 + b*M."""
    return hidden_dim, 4 * hidden_dim + 2


@dataclass
class FlopCount:
    aggregation_flops: int
    breakdown: dict[str, int]
    a: int
    b: int
    tokens: int
    n_early: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FlopCount":
        return cls(**data)


def count_flops(config: MtsaConfig, tokens: int | None = None) -> FlopCount:
    """Closed-form multiply counts for one token set (batch size 1)."""
    k = tokens if tokens is not None else config.tokens
    if k is None:
        raise ValueError("token count is required (config.tokens or tokens=)")
    d, big_d, n = config.hidden_dim, config.model_dim, config.n_sources
    m = n - 1
    a, b = aggregation_constants(d)
    breakdown = {
        "normalize": 2 * k * m * d,
        "cosine": k * m * m * d,
        "scores": k * m * d,
        "rate_division": k * m,
        "l1_division": k * m,
        "weighted_sum": k * m * d,
        "down_projection": k * d * sum(config.source_dims),
        "enhance_and_gate": n * k * (2 * d * d + d),
        "up_projection": k * d * big_d,
        "gate_mix": 2 * k * big_d,
    }
    agg = a * k * m * m + b * k * m
    assert agg == sum(breakdown[key] for key in
                      ("normalize", "cosine", "scores", "rate_division", "l1_division", "weighted_sum"))
    return FlopCount(agg, breakdown, a, b, k, m)


class _Counted:
    """Float that counts the multiplications and divisions it takes part in."""

    __slots__ = ("v", "tally")

    def __init__(self, v: float, tally: Counter):
        self.v = float(v)
        self.tally = tally

    def _wrap(self, v):
        return _Counted(v, self.tally)

    @staticmethod
    def _val(x):
        return x.v if isinstance(x, _Counted) else float(x)

    def __add__(self, o):
        return self._wrap(self.v + self._val(o))

    __radd__ = __add__

    def __mul__(self, o):
        self.tally["mul"] += 1
        return self._wrap(self.v * self._val(o))

    __rmul__ = __mul__

    def __truediv__(self, o):
        self.tally["div"] += 1
        return self._wrap(self.v / self._val(o))


def instrumented_aggregation(guidance: np.ndarray, early: np.ndarray) -> tuple[np.ndarray, int]:
    """Scalar-loop aggregation that counts every multiply and divide.

    ``guidance`` is (K, d) and ``early`` (K, M, d).  Rows and score vectors
    are assumed nonzero so every division executes.
    """
    tally: Counter = Counter()
    k_tokens, m, d = early.shape
    out = np.empty((k_tokens, d))
    for k in range(k_tokens):
        rows = [[_Counted(x, tally) for x in early[k, i]] for i in range(m)]
        unit = []
        for row in rows:
            sq = _Counted(0.0, tally)
            for x in row:
                sq = sq + x * x
            norm = math.sqrt(sq.v)
            unit.append([x / norm for x in row])
        rate = []
        for i in range(m):
            total = 0.0
            for j in range(m):
                dot = _Counted(0.0, tally)
                for t in range(d):
                    dot = dot + unit[i][t] * unit[j][t]
                total += max(dot.v, 0.0)
            rate.append(total)
        e = [_Counted(x, tally) for x in guidance[k]]
        scores = []
        for i in range(m):
            dot = _Counted(0.0, tally)
            for t in range(d):
                dot = dot + e[t] * rows[i][t]
            scores.append(_Counted(max(dot.v, 0.0), tally) / rate[i])
        total = sum(s.v for s in scores)
        weights = [s / total for s in scores]
        for t in range(d):
            acc = e[t]
            for i in range(m):
                acc = acc + weights[i] * rows[i][t]
            out[k, t] = acc.v
    return out, tally["mul"] + tally["div"]
