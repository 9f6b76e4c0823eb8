"""Multi-tiered sensing adapter.

Pipeline: per-source down-projection with ReLU, channel gating with a
residual enhancement, regrouping of layer-wise sets into token-wise sets,
redundancy rates from rectified cross-layer cosines, redundancy-normalised
linear attention guided by the last source, and a tanh-gated up-projection
mixed into the original input of the regulating layer.

All functions accept arbitrary leading batch axes; token and feature axes are
always the two trailing ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograph as ag
from .autograph import Tensor
from .errors import ConfigError, ContractError, DimensionError

AGGREGATORS = ("MTSA", "LinearA", "LinearA_r", "MHSA", "MaxPool", "AvePool")
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class Insertion:
    """Where the blend enters the late layers.

    ``position`` is a 1-based layer number.  ``standard`` always targets the
    last layer; ``single`` feeds layer ``position`` once; ``multi`` feeds
    every layer from ``position`` to the last.
    """

    kind: str = "standard"
    position: int | None = None

    def __post_init__(self):
        if self.kind not in ("standard", "single", "multi"):
            raise ConfigError(f"unknown insertion kind {self.kind!r}")
        if self.kind != "standard" and (self.position is None or self.position < 1):
            raise ConfigError(f"{self.kind} insertion needs a positive layer position")

    def start(self, n_layers: int) -> int:
        pos = n_layers if self.kind == "standard" else self.position
        if not 2 <= pos <= n_layers:
            raise ConfigError(f"insertion position {pos} outside 2..{n_layers}")
        return pos

    def __str__(self) -> str:
        return self.kind if self.kind == "standard" else f"{self.kind}@{self.position}"

    @classmethod
    def parse(cls, text: str) -> "Insertion":
        text = text.strip()
        if "@" in text:
            kind, pos = text.split("@", 1)
            return cls(kind.strip(), int(pos))
        return cls(text)


STANDARD = Insertion()


@dataclass(frozen=True)
class MtsaConfig:
    source_dims: tuple[int, ...]
    model_dim: int
    reduction: int = 8
    tokens: int | None = None
    gate_temperature: float = DEFAULT_TEMPERATURE
    aggregator: str = "MTSA"
    heads: int = 4
    insertion: Insertion = STANDARD

    def __post_init__(self):
        object.__setattr__(self, "source_dims", tuple(int(d) for d in self.source_dims))
        if len(self.source_dims) < 2:
            raise ConfigError("need at least two sources (one early set plus the guidance)")
        if self.reduction < 1 or self.model_dim % self.reduction:
            raise ConfigError(f"reduction {self.reduction} does not divide model_dim {self.model_dim}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.aggregator == "MHSA" and (self.heads < 1 or self.hidden_dim % self.heads):
            raise ConfigError(f"{self.heads} heads do not divide hidden_dim {self.hidden_dim}")
        if self.gate_temperature <= 0:
            raise ConfigError("gate_temperature must be positive")

    @property
    def n_sources(self) -> int:
        return len(self.source_dims)

    @property
    def hidden_dim(self) -> int:
        return self.model_dim // self.reduction


@dataclass
class MtsaParams:
    down_w: list[Tensor]
    down_b: list[Tensor]
    enhance_W: list[Tensor]
    enhance_Wp: list[Tensor]
    up_w: Tensor
    up_b: Tensor
    alpha: Tensor
    learnable_r: Tensor | None = None
    mhsa: dict[str, Tensor] | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        items = []
        for i, (w, b, g, e) in enumerate(zip(self.down_w, self.down_b, self.enhance_W, self.enhance_Wp)):
            items += [(f"mtsa.down{i}.w", w), (f"mtsa.down{i}.b", b),
                      (f"mtsa.gate{i}.W", g), (f"mtsa.enhance{i}.W", e)]
        items += [("mtsa.up.w", self.up_w), ("mtsa.up.b", self.up_b), ("mtsa.alpha", self.alpha)]
        if self.learnable_r is not None:
            items.append(("mtsa.learnable_r", self.learnable_r))
        for key, t in sorted((self.mhsa or {}).items()):
            items.append((f"mtsa.mhsa.{key}", t))
        return items

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors()))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: MtsaConfig, rng: np.random.Generator | int = 0) -> MtsaParams:
    """Fan-in scaled uniform weights, zero biases, zero gate scalar."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d, big_d = config.hidden_dim, config.model_dim
    p = ag.parameter
    down_w = [p(_uniform(rng, dn, (dn, d)), f"down{i}.w") for i, dn in enumerate(config.source_dims)]
    down_b = [p(np.zeros(d), f"down{i}.b") for i in range(config.n_sources)]
    enh_w = [p(_uniform(rng, d, (d, d)), f"gate{i}.W") for i in range(config.n_sources)]
    enh_wp = [p(_uniform(rng, d, (d, d)), f"enhance{i}.W") for i in range(config.n_sources)]
    params = MtsaParams(
        down_w, down_b, enh_w, enh_wp,
        up_w=p(_uniform(rng, d, (d, big_d)), "up.w"),
        up_b=p(np.zeros(big_d), "up.b"),
        alpha=p(np.zeros(()), "alpha"),
    )
    if config.aggregator == "LinearA_r":
        params.learnable_r = p(np.ones(config.n_sources - 1), "learnable_r")
    if config.aggregator == "MHSA":
        params.mhsa = {k: p(_uniform(rng, d, (d, d)), f"mhsa.{k}") for k in ("q", "k", "v", "o")}
    return params


# --------------------------------------------------------------------------
# stages

@dataclass
class ProjectedFeatures:
    f: list[Tensor]
    gates: list[Tensor]
    enhanced: list[Tensor]


@dataclass
class TokenGroups:
    guidance: Tensor  # (..., K, 1, d)
    early: Tensor     # (..., K, N-1, d)

    @property
    def n_early(self) -> int:
        return self.early.shape[-2]


@dataclass
class RedundancyProfile:
    cosine: Tensor  # (..., N-1, N-1), before rectification
    rate: Tensor    # (..., N-1)


@dataclass
class BlendedFeatures:
    weights: Tensor  # (..., N-1)
    blended: Tensor  # (..., d)


def down_project(hidden_states: Sequence[Tensor], params: MtsaParams) -> list[Tensor]:
    if len(hidden_states) > len(params.down_w):
        raise ConfigError(f"{len(hidden_states)} sources but only {len(params.down_w)} projections")
    out = []
    for n, h in enumerate(hidden_states):
        w, b = params.down_w[n], params.down_b[n]
        if h.shape[-1] != w.shape[0]:
            raise ConfigError(f"source {n} has width {h.shape[-1]}, projection expects {w.shape[0]}")
        out.append(ag.relu(ag.add_bias(ag.matmul(h, w), b)))
    return out


def enhance_and_gate(f: Sequence[Tensor], params: MtsaParams) -> ProjectedFeatures:
    gates, enhanced = [], []
    for n, fn in enumerate(f):
        g = ag.sigmoid(ag.matmul(fn, params.enhance_W[n]))
        gates.append(g)
        enhanced.append(ag.mul(g, ag.add(ag.matmul(fn, params.enhance_Wp[n]), fn)))
    return ProjectedFeatures(list(f), gates, enhanced)


def regroup(enhanced: Sequence[Tensor]) -> TokenGroups:
    """Layer-wise (..., K, d) sets to token-wise groups; the last set guides."""
    if len(enhanced) < 2:
        raise ConfigError("regroup needs at least two feature sets")
    shapes = {t.shape for t in enhanced}
    if len(shapes) != 1:
        raise DimensionError(f"feature sets disagree in shape: {sorted(shapes)}")
    last = enhanced[-1]
    guidance = ag.reshape(last, last.shape[:-1] + (1, last.shape[-1]))
    early = ag.stack(list(enhanced[:-1]), axis=-2)
    return TokenGroups(guidance, early)


def ungroup(groups: TokenGroups) -> list[Tensor]:
    """Inverse of :func:`regroup`."""
    m = groups.n_early
    sets = [ag.getitem(groups.early, (Ellipsis, i, slice(None))) for i in range(m)]
    g = groups.guidance
    sets.append(ag.reshape(g, g.shape[:-2] + (g.shape[-1],)))
    return sets


def redundancy_rate(early: Tensor) -> RedundancyProfile:
    """Row sums of the rectified cosine matrix of each (N-1, d) early set."""
    unit = ag.l2_rows(early)
    cos = ag.matmul(unit, ag.swap_last(unit))
    return RedundancyProfile(cos, ag.sum(ag.relu(cos), axis=-1))


def _weights_and_blend(guidance: Tensor, early: Tensor, scores: Tensor) -> BlendedFeatures:
    m = ag.l1_vector(scores)
    blended = ag.add(ag.matmul(m, early), guidance)
    return BlendedFeatures(ag.reshape(m, m.shape[:-2] + (m.shape[-1],)),
                           ag.reshape(blended, blended.shape[:-2] + (blended.shape[-1],)))


def _raw_scores(guidance: Tensor, early: Tensor) -> Tensor:
    return ag.relu(ag.matmul(guidance, ag.swap_last(early)))


def aggregate(guidance: Tensor, early: Tensor, rate: Tensor) -> BlendedFeatures:
    """Redundancy-normalised linear attention.

    ``guidance`` is (..., 1, d), ``early`` (..., M, d) and ``rate`` (..., M).
    Scores that sum to zero give all-zero weights and the guidance passes
    through unchanged.
    """
    if guidance.shape[-2] != 1 or guidance.shape[-1] != early.shape[-1]:
        raise DimensionError(f"guidance {guidance.shape} does not match early {early.shape}")
    if rate.shape != early.shape[:-1]:
        raise DimensionError(f"rate {rate.shape} does not match early {early.shape}")
    scores = _raw_scores(guidance, early)
    scores = ag.div(scores, ag.reshape(rate, scores.shape))
    return _weights_and_blend(guidance, early, scores)


def _mhsa(guidance: Tensor, early: Tensor, weights: dict[str, Tensor], heads: int) -> Tensor:
    d = guidance.shape[-1]
    dh = d // heads
    lead = guidance.shape[:-2]
    m = early.shape[-2]

    def split(x, rows):
        x = ag.reshape(x, lead + (rows, heads, dh))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return ag.transpose(x, axes)  # (..., heads, rows, dh)

    q = split(ag.matmul(guidance, weights["q"]), 1)
    k = split(ag.matmul(early, weights["k"]), m)
    v = split(ag.matmul(early, weights["v"]), m)
    att = ag.softmax(ag.scale(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(dh)), axis=-1)
    ctx = ag.matmul(att, v)  # (..., heads, 1, dh)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    ctx = ag.reshape(ag.transpose(ctx, axes), lead + (1, d))
    return ag.add(ag.matmul(ctx, weights["o"]), guidance)


def aggregate_variant(kind: str, guidance: Tensor, early: Tensor, params: MtsaParams,
                      heads: int = 4, rate: Tensor | None = None) -> Tensor:
    """Blended (..., d) features from one of the ablation aggregators."""
    lead = guidance.shape[:-2]
    d = guidance.shape[-1]
    if kind == "MTSA":
        if rate is None:
            rate = redundancy_rate(early).rate
        return aggregate(guidance, early, rate).blended
    if kind == "LinearA":
        return _weights_and_blend(guidance, early, _raw_scores(guidance, early)).blended
    if kind == "LinearA_r":
        if params.learnable_r is None:
            raise ConfigError("LinearA_r needs a learnable rate vector")
        m = early.shape[-2]
        r = ag.getitem(params.learnable_r, slice(0, m))
        scores = _raw_scores(guidance, early)
        scores = ag.div(scores, ag.expand(r, scores.shape))
        return _weights_and_blend(guidance, early, scores).blended
    if kind in ("MaxPool", "AvePool"):
        pooled = ag.amax(early, axis=-2) if kind == "MaxPool" else ag.mean(early, axis=-2)
        return ag.add(pooled, ag.reshape(guidance, lead + (d,)))
    if kind == "MHSA":
        if params.mhsa is None:
            raise ConfigError("MHSA needs attention projections")
        out = _mhsa(guidance, early, params.mhsa, heads)
        return ag.reshape(out, lead + (d,))
    raise ConfigError(f"unknown aggregator {kind!r}")


def gate_value(params: MtsaParams, temperature: float = DEFAULT_TEMPERATURE) -> float:
    return float(np.tanh(params.alpha.data / temperature))


def up_project_and_mix(blended: Tensor, original_last_input: Tensor, params: MtsaParams,
                       temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """``u * up(blended) + (1 - u) * original`` with ``u = tanh(alpha / T)``."""
    up = ag.add_bias(ag.matmul(blended, params.up_w), params.up_b)
    if up.shape != original_last_input.shape:
        raise DimensionError(f"up-projection {up.shape} vs original input {original_last_input.shape}")
    u = ag.tanh(ag.scale(params.alpha, 1.0 / temperature))
    keep = ag.sub(1.0, u)
    return ag.add(ag.mul(u, up), ag.mul(keep, original_last_input))


@dataclass
class MtsaTrace:
    """Intermediate values of one forward pass, kept for inspection."""

    projected: ProjectedFeatures
    groups: TokenGroups
    redundancy: RedundancyProfile | None
    blended: Tensor
    mixed: Tensor
    extras: dict = field(default_factory=dict)


def mtsa_forward(hidden_states: Sequence[Tensor], original_last_input: Tensor,
                 config: MtsaConfig, params: MtsaParams, *, allow_attached: bool = False,
                 return_trace: bool = False):
    """Blend detached source features into the input of the regulating layer.

    ``hidden_states`` may be a prefix of the configured sources (multi-layer
    insertion grows the pool one layer at a time).  Unless ``allow_attached``
    is set, every source and the original input must be detached.
    """
    if not allow_attached:
        for i, h in enumerate(list(hidden_states) + [original_last_input]):
            if h.requires_grad:
                raise ContractError(f"source {i} is attached to the gradient graph")
    if len(hidden_states) < 2:
        raise ConfigError("mtsa_forward needs at least two sources")
    with ag.origin("mtsa"):
        f = down_project(hidden_states, params)
        projected = enhance_and_gate(f, params)
        groups = regroup(projected.enhanced)
        profile = None
        if config.aggregator == "MTSA":
            profile = redundancy_rate(groups.early)
            blended = aggregate(groups.guidance, groups.early, profile.rate).blended
        else:
            blended = aggregate_variant(config.aggregator, groups.guidance, groups.early,
                                        params, heads=config.heads)
        mixed = up_project_and_mix(blended, original_last_input, params, config.gate_temperature)
    if return_trace:
        return mixed, MtsaTrace(projected, groups, profile, blended, mixed)
    return mixed


@dataclass
class Adapter:
    """A configured adapter with its parameters."""

    config: MtsaConfig
    params: MtsaParams

    @classmethod
    def create(cls, config: MtsaConfig, seed: int | np.random.Generator = 0) -> "Adapter":
        return cls(config, init_params(config, seed))

    def __call__(self, hidden_states: Sequence[Tensor], original_last_input: Tensor,
                 allow_attached: bool = False) -> Tensor:
        return mtsa_forward(hidden_states, original_last_input, self.config, self.params,
                            allow_attached=allow_attached)

    @property
    def gate(self) -> float:
        return gate_value(self.params, self.config.gate_temperature)
