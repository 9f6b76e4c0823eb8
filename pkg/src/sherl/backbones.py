"""Frozen toy backbones that expose detached intermediate features.

Three families share one contract: ``trace`` runs the network without
recording and returns detached sources plus the original input of the
regulating layer; ``replay_last`` (or, more generally, ``run_from``) runs the
late layers with recording so gradients can pass through them while their
own parameters stay frozen.

Layer indices are 0-based throughout this module.  Every layer's buffers are
attributed to the origin ``backbone-layer-<i>`` (``backbone-enc-layer-<i>``
and ``backbone-dec-layer-<i>`` for the encoder-decoder).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograph as ag
from .autograph import Tensor
from .errors import ConfigError, DimensionError

FAMILIES = ("transformer", "cnn", "encdec")


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "transformer"
    n_layers: int = 4
    model_dim: int = 16
    n_heads: int = 2
    seq_len: int = 8
    in_features: int = 12
    mlp_ratio: int = 2
    # cnn
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    in_channels: int = 3
    image_size: int = 16
    # encoder-decoder: n_layers counts decoder layers, enc_layers the encoder
    enc_layers: int = 3
    tgt_len: int = 6
    drop_mask: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drop_mask", frozenset(int(i) for i in self.drop_mask))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}")
        n = len(self.stage_channels) if self.family == "cnn" else self.n_layers
        if self.family == "cnn" and self.n_layers != n:
            object.__setattr__(self, "n_layers", n)
        if n < 2:
            raise ConfigError("a backbone needs at least two layers")
        if any(i < 0 or i >= n for i in self.drop_mask):
            raise ConfigError(f"drop_mask {sorted(self.drop_mask)} outside layers 0..{n - 1}")
        if n - 1 in self.drop_mask:
            raise ConfigError("the last layer regulates the blend and cannot be dropped")
        if self.family != "cnn" and self.model_dim % self.n_heads:
            raise ConfigError("n_heads must divide model_dim")
        if self.family == "cnn":
            if self.stage_channels[0] % 2:
                raise ConfigError("first stage width must be even (the stem uses half of it)")
            if self.image_size % (2 ** (n - 1)):
                raise ConfigError("image_size must be divisible by 2**(stages-1)")
        if self.family == "encdec" and self.enc_layers < 1:
            raise ConfigError("encoder needs at least one layer")


@dataclass
class BackboneTrace:
    """Detached view of one forward pass."""

    sources: list[Tensor]
    last_layer_input: Tensor
    final_output: Tensor
    layer_inputs: list[Tensor] = field(default_factory=list)
    memory: Tensor | None = None
    extras: dict = field(default_factory=dict)


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Backbone:
    """Common parameter handling; subclasses define the layers."""

    family = ""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.calls: Counter = Counter()
        self._rng = np.random.default_rng(spec.seed)
        self._build()
        del self._rng

    # -- parameters -------------------------------------------------------
    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = ag.parameter(data, name=f"backbone.{name}", trainable=False)
        self.params[name] = t
        return t

    def _dense(self, name: str, fan_in: int, fan_out: int) -> None:
        self._param(f"{name}.w", _init(self._rng, fan_in, (fan_in, fan_out)))
        self._param(f"{name}.b", np.zeros(fan_out))

    def _norm(self, name: str, dim: int) -> None:
        self._param(f"{name}.g", np.ones(dim))
        self._param(f"{name}.b", np.zeros(dim))

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"backbone.{k}", v) for k, v in self.params.items()]

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"weight names do not match the backbone: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"weight {k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "Backbone":
        other = build(self.spec)
        other.load_state(self.state())
        return other

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    def layer_origin(self, i: int) -> str:
        return f"backbone-layer-{i}"

    def _dense_apply(self, name: str, x: Tensor) -> Tensor:
        return ag.add_bias(ag.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def _ln(self, name: str, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    # -- source selection ---------------------------------------------------
    def source_layers(self, position: int | None = None) -> list[int]:
        """Layers whose outputs feed the adapter when regulating at ``position``.

        ``position`` is the 1-based number of the first regulating layer
        (defaults to the last layer).  The output of the layer right before
        it is always kept: it is the guidance source.
        """
        position = self.n_layers if position is None else position
        guide = position - 2
        return [j for j in range(position - 1) if j not in self.spec.drop_mask or j == guide]

    def n_sources(self, position: int | None = None) -> int:
        return 1 + len(self.source_layers(position))


# --------------------------------------------------------------------------
# transformer

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, k, d = x.shape
    return ag.transpose(ag.reshape(x, (b, k, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, k, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, k, h * dh))


class _AttentionMixin:
    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor) -> Tensor:
        heads = self.spec.n_heads
        q = _split_heads(self._dense_apply(f"{prefix}.q", q_in), heads)
        k = _split_heads(self._dense_apply(f"{prefix}.k", kv_in), heads)
        v = _split_heads(self._dense_apply(f"{prefix}.v", kv_in), heads)
        scale = 1.0 / math.sqrt(q.shape[-1])
        att = ag.softmax(ag.scale(ag.matmul(q, ag.swap_last(k)), scale), axis=-1)
        return self._dense_apply(f"{prefix}.o", _merge_heads(ag.matmul(att, v)))

    def _attn_params(self, prefix: str, d: int) -> None:
        for part in ("q", "k", "v", "o"):
            self._dense(f"{prefix}.{part}", d, d)

    def _mlp_params(self, prefix: str, d: int) -> None:
        self._dense(f"{prefix}.fc1", d, d * self.spec.mlp_ratio)
        self._dense(f"{prefix}.fc2", d * self.spec.mlp_ratio, d)

    def _mlp(self, prefix: str, h: Tensor) -> Tensor:
        return self._dense_apply(f"{prefix}.fc2", ag.relu(self._dense_apply(f"{prefix}.fc1", h)))

    def _embed(self, prefix: str, x: Tensor, length: int) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (length, self.spec.in_features):
            raise DimensionError(f"expected (B, {length}, {self.spec.in_features}) input, got {x.shape}")
        h = self._dense_apply(prefix, x)
        return ag.add(h, ag.expand(self.params[f"{prefix}.pos"], h.shape))


class TransformerBackbone(_AttentionMixin, Backbone):
    """Post-norm encoder blocks over (B, K, F) continuous token features."""

    family = "transformer"

    def _build(self):
        s = self.spec
        self._dense("embed", s.in_features, s.model_dim)
        self._param("embed.pos", _init(self._rng, 1, (s.seq_len, s.model_dim)) * 0.1)
        for i in range(s.n_layers):
            self._attn_params(f"layer{i}.attn", s.model_dim)
            self._norm(f"layer{i}.ln1", s.model_dim)
            self._mlp_params(f"layer{i}.mlp", s.model_dim)
            self._norm(f"layer{i}.ln2", s.model_dim)

    @property
    def source_dims(self) -> list[int]:
        return [self.spec.model_dim] * self.n_sources()

    @property
    def last_dim(self) -> int:
        return self.spec.model_dim

    def embed(self, x: Tensor) -> Tensor:
        with ag.origin("backbone-embed"):
            return self._embed("embed", x, self.spec.seq_len)

    def layer(self, i: int, h: Tensor) -> Tensor:
        self.calls[self.layer_origin(i)] += 1
        p = f"layer{i}"
        with ag.origin(self.layer_origin(i)):
            h = self._ln(f"{p}.ln1", ag.add(h, self._attention(f"{p}.attn", h, h)))
            return self._ln(f"{p}.ln2", ag.add(h, self._mlp(f"{p}.mlp", h)))

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(_as_tensor(x))
        for i in range(self.n_layers):
            h = self.layer(i, h)
        return h

    def trace(self, x) -> BackboneTrace:
        x = _as_tensor(x)
        with ag.paused():
            h = self.embed(x)
            inputs = [h]
            for i in range(self.n_layers):
                h = self.layer(i, h)
                inputs.append(h)
        final = inputs.pop()
        detached = [t.detach() for t in inputs]
        sources = [detached[0]] + [detached[j + 1] for j in self.source_layers()]
        return BackboneTrace(sources, detached[-1], final.detach(), layer_inputs=detached)

    def sources_at(self, trace: BackboneTrace, position: int) -> list[Tensor]:
        inputs = trace.layer_inputs
        return [inputs[0]] + [inputs[j + 1] for j in self.source_layers(position)]

    def run_from(self, start: int, h: Tensor) -> Tensor:
        """Apply layers ``start..n-1`` (0-based) to ``h``."""
        for i in range(start, self.n_layers):
            h = self.layer(i, h)
        return h

    def replay_last(self, substituted: Tensor) -> Tensor:
        expected = (self.spec.seq_len, self.spec.model_dim)
        if substituted.shape[-2:] != expected:
            raise DimensionError(f"last layer expects (..., {expected}), got {substituted.shape}")
        return self.layer(self.n_layers - 1, substituted)


# --------------------------------------------------------------------------
# cnn

class CNNBackbone(Backbone):
    """Stem plus stages of two 3x3 convolutions; stages after the first halve the resolution."""

    family = "cnn"

    def _build(self):
        s = self.spec
        stem = s.stage_channels[0] // 2
        self._conv("stem", s.in_channels, stem)
        prev = stem
        for i, c in enumerate(s.stage_channels):
            self._conv(f"stage{i}.conv1", prev, c)
            self._conv(f"stage{i}.conv2", c, c)
            prev = c

    def _conv(self, name: str, cin: int, cout: int) -> None:
        self._param(f"{name}.w", _init(self._rng, cin * 9, (cout, cin, 3, 3)) * math.sqrt(2.0))
        self._param(f"{name}.b", np.zeros(cout))

    def _conv_apply(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return ag.relu(ag.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, 1))

    @property
    def token_grid(self) -> tuple[int, int]:
        side = self.spec.image_size // 2 ** (self.n_layers - 2)
        return side, side

    @property
    def tokens(self) -> int:
        h, w = self.token_grid
        return h * w

    @property
    def source_dims(self) -> list[int]:
        chans = self.spec.stage_channels
        return [chans[0] // 2] + [chans[j] for j in self.source_layers()]

    @property
    def last_dim(self) -> int:
        return self.spec.stage_channels[-2]

    def embed(self, x: Tensor) -> Tensor:
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.image_size, s.image_size):
            raise DimensionError(f"expected (B, {s.in_channels}, {s.image_size}, {s.image_size}), got {x.shape}")
        with ag.origin("backbone-embed"):
            return self._conv_apply("stem", x)

    def layer(self, i: int, h: Tensor) -> Tensor:
        self.calls[self.layer_origin(i)] += 1
        with ag.origin(self.layer_origin(i)):
            h = self._conv_apply(f"stage{i}.conv1", h, stride=1 if i == 0 else 2)
            return self._conv_apply(f"stage{i}.conv2", h)

    def forward(self, x) -> Tensor:
        h = self.embed(_as_tensor(x))
        for i in range(self.n_layers):
            h = self.layer(i, h)
        return h

    def to_tokens(self, fmap: Tensor) -> Tensor:
        """(B, C, H, W) map pooled to the token grid, as (B, H'W', C)."""
        gh, gw = self.token_grid
        if fmap.shape[-2:] != (gh, gw):
            fmap = ag.pooling("adaptive_avg", fmap, (gh, gw))
        b, c = fmap.shape[:2]
        return ag.reshape(ag.transpose(fmap, (0, 2, 3, 1)), (b, gh * gw, c))

    def from_tokens(self, tokens: Tensor) -> Tensor:
        gh, gw = self.token_grid
        b, k, c = tokens.shape
        if k != gh * gw:
            raise DimensionError(f"expected {gh * gw} tokens, got {k}")
        return ag.transpose(ag.reshape(tokens, (b, gh, gw, c)), (0, 3, 1, 2))

    def trace(self, x) -> BackboneTrace:
        x = _as_tensor(x)
        with ag.paused():
            h = self.embed(x)
            maps = [h]
            for i in range(self.n_layers):
                h = self.layer(i, h)
                maps.append(h)
            final = maps.pop()
            tokens = [self.to_tokens(m).detach() for m in maps]
        sources = [tokens[0]] + [tokens[j + 1] for j in self.source_layers()]
        return BackboneTrace(sources, tokens[-1], final.detach(), layer_inputs=tokens,
                             extras={"pooled_shapes": [m.shape[-2:] for m in maps]})

    def replay_last(self, substituted: Tensor) -> Tensor:
        if substituted.shape[-1] != self.last_dim:
            raise DimensionError(f"last stage expects {self.last_dim} channels, got {substituted.shape}")
        return self.layer(self.n_layers - 1, self.from_tokens(substituted))


# --------------------------------------------------------------------------
# encoder-decoder

class EncDecBackbone(_AttentionMixin, Backbone):
    """Post-norm encoder and decoder; the decoder cross-attends to encoder memory.

    ``n_layers`` counts decoder layers (the late route lives in the decoder);
    ``enc_layers`` counts encoder layers.  Inputs are ``(src, tgt)`` pairs of
    (B, K_src, F) and (B, K_tgt, F) arrays.
    """

    family = "encdec"

    def _build(self):
        s = self.spec
        d = s.model_dim
        self._dense("enc_embed", s.in_features, d)
        self._param("enc_embed.pos", _init(self._rng, 1, (s.seq_len, d)) * 0.1)
        self._dense("dec_embed", s.in_features, d)
        self._param("dec_embed.pos", _init(self._rng, 1, (s.tgt_len, d)) * 0.1)
        for i in range(s.enc_layers):
            self._attn_params(f"enc{i}.attn", d)
            self._norm(f"enc{i}.ln1", d)
            self._mlp_params(f"enc{i}.mlp", d)
            self._norm(f"enc{i}.ln2", d)
        for i in range(s.n_layers):
            self._attn_params(f"dec{i}.self", d)
            self._norm(f"dec{i}.ln1", d)
            self._attn_params(f"dec{i}.cross", d)
            self._norm(f"dec{i}.ln2", d)
            self._mlp_params(f"dec{i}.mlp", d)
            self._norm(f"dec{i}.ln3", d)

    def layer_origin(self, i: int) -> str:
        return f"backbone-dec-layer-{i}"

    def enc_origin(self, i: int) -> str:
        return f"backbone-enc-layer-{i}"

    @property
    def source_dims(self) -> list[int]:
        return [self.spec.model_dim] * self.n_sources()

    @property
    def enc_source_dims(self) -> list[int]:
        return [self.spec.model_dim] * (1 + self.spec.enc_layers)

    @property
    def last_dim(self) -> int:
        return self.spec.model_dim

    def encode(self, src: Tensor) -> list[Tensor]:
        """Encoder embedding followed by the output of every encoder layer."""
        with ag.origin("backbone-enc-embed"):
            h = self._embed("enc_embed", src, self.spec.seq_len)
        states = [h]
        for i in range(self.spec.enc_layers):
            self.calls[self.enc_origin(i)] += 1
            p = f"enc{i}"
            with ag.origin(self.enc_origin(i)):
                h = self._ln(f"{p}.ln1", ag.add(h, self._attention(f"{p}.attn", h, h)))
                h = self._ln(f"{p}.ln2", ag.add(h, self._mlp(f"{p}.mlp", h)))
            states.append(h)
        return states

    def dec_embed(self, tgt: Tensor) -> Tensor:
        with ag.origin("backbone-dec-embed"):
            return self._embed("dec_embed", tgt, self.spec.tgt_len)

    def layer(self, i: int, h: Tensor, memory: Tensor | None = None) -> Tensor:
        if memory is None:
            raise ConfigError("decoder layers need encoder memory")
        self.calls[self.layer_origin(i)] += 1
        p = f"dec{i}"
        with ag.origin(self.layer_origin(i)):
            h = self._ln(f"{p}.ln1", ag.add(h, self._attention(f"{p}.self", h, h)))
            h = self._ln(f"{p}.ln2", ag.add(h, self._attention(f"{p}.cross", h, memory)))
            return self._ln(f"{p}.ln3", ag.add(h, self._mlp(f"{p}.mlp", h)))

    def forward(self, inputs) -> Tensor:
        src, tgt = (_as_tensor(v) for v in inputs)
        memory = self.encode(src)[-1]
        h = self.dec_embed(tgt)
        for i in range(self.n_layers):
            h = self.layer(i, h, memory)
        return h

    def trace(self, inputs) -> BackboneTrace:
        src, tgt = (_as_tensor(v) for v in inputs)
        with ag.paused():
            enc_states = self.encode(src)
            memory = enc_states[-1]
            h = self.dec_embed(tgt)
            dec_inputs = [h]
            for i in range(self.n_layers):
                h = self.layer(i, h, memory)
                dec_inputs.append(h)
        final = dec_inputs.pop()
        detached = [t.detach() for t in dec_inputs]
        sources = [detached[0]] + [detached[j + 1] for j in self.source_layers()]
        return BackboneTrace(sources, detached[-1], final.detach(), layer_inputs=detached,
                             memory=memory.detach(),
                             extras={"enc_states": [t.detach() for t in enc_states]})

    def sources_at(self, trace: BackboneTrace, position: int) -> list[Tensor]:
        inputs = trace.layer_inputs
        return [inputs[0]] + [inputs[j + 1] for j in self.source_layers(position)]

    def run_from(self, start: int, h: Tensor, memory: Tensor) -> Tensor:
        for i in range(start, self.n_layers):
            h = self.layer(i, h, memory)
        return h

    def replay_last(self, substituted: Tensor, memory: Tensor | None = None) -> Tensor:
        if memory is None:
            raise ConfigError("replay_last on an encoder-decoder needs the encoder memory")
        expected = (self.spec.tgt_len, self.spec.model_dim)
        if substituted.shape[-2:] != expected:
            raise DimensionError(f"last decoder layer expects (..., {expected}), got {substituted.shape}")
        return self.layer(self.n_layers - 1, substituted, memory)


_CLASSES = {"transformer": TransformerBackbone, "cnn": CNNBackbone, "encdec": EncDecBackbone}


def build(spec: BackboneSpec) -> Backbone:
    """Deterministic frozen backbone for ``spec``."""
    return _CLASSES[spec.family](spec)


def trace(backbone: Backbone, inputs) -> BackboneTrace:
    return backbone.trace(inputs)


def replay_last(backbone: Backbone, substituted: Tensor, memory: Tensor | None = None) -> Tensor:
    if isinstance(backbone, EncDecBackbone):
        return backbone.replay_last(substituted, memory)
    return backbone.replay_last(substituted)


def with_seed(spec: BackboneSpec, seed: int) -> BackboneSpec:
    return replace(spec, seed=seed)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ag.constant(x)


def encoder_source_layers(backbone: EncDecBackbone) -> list[int]:
    """Encoder layers feeding the encoder-side adapter; the final one always guides."""
    last = backbone.spec.enc_layers - 1
    return [j for j in range(backbone.spec.enc_layers) if j not in backbone.spec.drop_mask or j == last]


def encoder_sources(backbone: EncDecBackbone, trace: BackboneTrace) -> list[Tensor]:
    states = trace.extras["enc_states"]
    return [states[0]] + [states[j + 1] for j in encoder_source_layers(backbone)]


def encdec_route(backbone: EncDecBackbone, inputs, mtsa_enc, mtsa_dec,
                 trace: BackboneTrace | None = None) -> Tensor:
    """Late-route decoder output with adapters on both sides.

    The encoder-side blend is mixed into the final encoder output and used
    directly as cross-attention memory, so no encoder layer runs a second
    time.  The decoder side uses standard last-layer insertion.
    """
    if not isinstance(backbone, EncDecBackbone):
        raise ConfigError("encdec_route needs an encoder-decoder backbone")
    if trace is None:
        trace = backbone.trace(inputs)
    memory = mtsa_enc(encoder_sources(backbone, trace), trace.memory)
    mixed = mtsa_dec(trace.sources, trace.last_layer_input)
    return backbone.replay_last(mixed, memory)
