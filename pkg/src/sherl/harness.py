"""Training loop, strategies and experiment drivers.

A :class:`Strategy` decides what is trained: ``SHERL`` trains the adapter(s)
and a fresh head while routing gradients only through the late layers,
``LinearProbe`` trains only the head on frozen final features, and
``FullFT`` unfreezes a private copy of the backbone.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograph as ag
from .accountant import audit_gradients, audit_memory, count_flops
from .autograph import Tensor
from .backbones import (Backbone, BackboneSpec, BackboneTrace, CNNBackbone, EncDecBackbone,
                        build, encoder_source_layers, encoder_sources)
from .errors import ConfigError, NumericDivergenceError
from .mtsa import Adapter, Insertion, MtsaConfig, STANDARD
from .optim import AdamW, WARMUPS, lr_at
from .report import RunReport
from .tasks import Domain, Split, TaskSpec, generate_task

log = logging.getLogger(__name__)

STRATEGIES = ("SHERL", "LinearProbe", "FullFT")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 10
    batch_size: int = 32
    warmup: str = "none"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup not in WARMUPS:
            raise ConfigError(f"warmup must be one of {WARMUPS}")


@dataclass(frozen=True)
class Strategy:
    kind: str = "SHERL"
    aggregator: str = "MTSA"
    insertion: Insertion = STANDARD
    reduction: int = 8

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}")

    @property
    def label(self) -> str:
        if self.kind != "SHERL":
            return self.kind
        parts = [f"SHERL[{self.aggregator}]"]
        if self.insertion.kind != "standard":
            parts.append(str(self.insertion))
        parts.append(f"r={self.reduction}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "aggregator": self.aggregator,
                "insertion": str(self.insertion), "reduction": self.reduction}

    @classmethod
    def from_dict(cls, data) -> "Strategy":
        return cls(data["kind"], data.get("aggregator", "MTSA"),
                   Insertion.parse(data.get("insertion", "standard")), int(data.get("reduction", 8)))


# --------------------------------------------------------------------------
# model assembly

def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def late_route(backbone: Backbone, trace: BackboneTrace, adapter: Adapter,
               insertion: Insertion = STANDARD, memory: Tensor | None = None,
               mixed_out: list | None = None) -> Tensor:
    """Run the regulating layers with the adapter blend inserted.

    ``single`` mixes the blend into the input of layer ``position`` and runs
    the remaining layers on top.  ``multi`` re-aggregates before every layer
    from ``position`` on, each layer's own input joining the source pool as
    the new guidance.
    """
    n = backbone.n_layers
    start = insertion.start(n)
    if isinstance(backbone, CNNBackbone):
        if start != n:
            raise ConfigError("CNN backbones support only last-stage insertion")
        mixed = adapter(trace.sources, trace.last_layer_input)
        if mixed_out is not None:
            mixed_out.append(mixed)
        return backbone.replay_last(mixed)
    base = backbone.sources_at(trace, start)
    h = trace.layer_inputs[start - 1]
    grown: list[Tensor] = []
    for layer in range(start - 1, n):
        if layer == start - 1 or insertion.kind == "multi":
            h = adapter(base + grown, h, allow_attached=bool(grown))
            if mixed_out is not None:
                mixed_out.append(h)
        h = backbone.layer(layer, h, memory) if memory is not None else backbone.layer(layer, h)
        if insertion.kind == "multi":
            grown.append(h)
    return h


def _heads(width: int, reduction: int) -> int:
    hidden = width // reduction if width % reduction == 0 else 1
    return math.gcd(4, max(hidden, 1))


def adapter_config(backbone: Backbone, strategy: Strategy, encoder: bool = False) -> MtsaConfig:
    """Adapter shape for ``strategy`` on ``backbone`` (the encoder side when ``encoder``)."""
    spec = backbone.spec
    insertion = strategy.insertion
    if encoder:
        dims = (spec.model_dim,) * (1 + len(encoder_source_layers(backbone)))
        width, tokens, insertion = spec.model_dim, spec.seq_len, STANDARD
    elif isinstance(backbone, CNNBackbone):
        insertion.start(backbone.n_layers)
        dims, width, tokens = tuple(backbone.source_dims), backbone.last_dim, backbone.tokens
    else:
        n = backbone.n_layers
        start = insertion.start(n)
        count = backbone.n_sources(start) + (n - start if insertion.kind == "multi" else 0)
        dims, width = (spec.model_dim,) * count, spec.model_dim
        tokens = spec.tgt_len if isinstance(backbone, EncDecBackbone) else spec.seq_len
    return MtsaConfig(dims, width, strategy.reduction, tokens=tokens, aggregator=strategy.aggregator,
                      insertion=insertion, heads=_heads(width, strategy.reduction))


class Model:
    """Backbone, optional adapters and a classification head for one strategy."""

    def __init__(self, strategy: Strategy, backbone: Backbone, n_classes: int, seed: int = 0):
        self.strategy = strategy
        rng = np.random.default_rng([seed, 7])
        if strategy.kind == "FullFT":
            backbone = backbone.clone()
            backbone.set_trainable(True)
        self.backbone = backbone
        self.adapter: Adapter | None = None
        self.enc_adapter: Adapter | None = None
        if strategy.kind == "SHERL":
            self.adapter = Adapter.create(adapter_config(backbone, strategy), rng)
            if isinstance(backbone, EncDecBackbone):
                self.enc_adapter = Adapter.create(adapter_config(backbone, strategy, encoder=True), rng)
        width = backbone.spec.stage_channels[-1] if isinstance(backbone, CNNBackbone) else backbone.spec.model_dim
        self.head_w = ag.parameter(_uniform(rng, width, (width, n_classes)), "head.w")
        self.head_b = ag.parameter(np.zeros(n_classes), "head.b")
        self.last_inputs: dict[str, Tensor] = {}
        self.last_mixed: list[Tensor] = []

    # -- parameter registries ------------------------------------------------
    def adapter_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.adapter is not None:
            out += self.adapter.params.named()
        if self.enc_adapter is not None:
            out += [(f"enc_{k}", t) for k, t in self.enc_adapter.params.named()]
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        out = [("head.w", self.head_w), ("head.b", self.head_b)] + self.adapter_parameters()
        if self.strategy.kind == "FullFT":
            out += self.backbone.named_parameters()
        return out

    def registry(self) -> dict[str, Tensor]:
        reg = dict(self.backbone.named_parameters())
        reg.update(self.adapter_parameters())
        reg["head.w"], reg["head.b"] = self.head_w, self.head_b
        return reg

    def frozen_names(self) -> set[str]:
        if self.strategy.kind == "FullFT":
            return set()
        return {name for name, _ in self.backbone.named_parameters()}

    # -- forward ----------------------------------------------------------------
    def features(self, x) -> Tensor:
        bb = self.backbone
        kind = self.strategy.kind
        if kind == "FullFT":
            self.last_inputs = {}
            return bb.forward(x)
        tr = bb.trace(x)
        self.last_inputs = {f"source{i}": s for i, s in enumerate(tr.sources)}
        self.last_inputs["last_layer_input"] = tr.last_layer_input
        if kind == "LinearProbe":
            return tr.final_output
        self.last_mixed = []
        memory = None
        if isinstance(bb, EncDecBackbone):
            memory = self.enc_adapter(encoder_sources(bb, tr), tr.memory)
            self.last_mixed.append(memory)
            self.last_inputs["memory"] = tr.memory
        return late_route(bb, tr, self.adapter, self.strategy.insertion, memory, self.last_mixed)

    def head(self, feats: Tensor) -> Tensor:
        with ag.origin("head"):
            if feats.ndim == 4:  # cnn map
                b, c = feats.shape[:2]
                pooled = ag.mean(ag.reshape(feats, (b, c, -1)), axis=2)
            elif isinstance(self.backbone, EncDecBackbone):
                pooled = ag.reshape(feats, (-1, feats.shape[-1]))
            else:
                pooled = ag.mean(feats, axis=1)
            return ag.add_bias(ag.matmul(pooled, self.head_w), self.head_b)

    def logits(self, x) -> Tensor:
        return self.head(self.features(x))

    def predict(self, x, batch: int = 256) -> np.ndarray:
        n = len(x[0]) if isinstance(x, tuple) else len(x)
        out = []
        with ag.paused():
            for i in range(0, n, batch):
                sl = slice(i, i + batch)
                xb = tuple(part[sl] for part in x) if isinstance(x, tuple) else x[sl]
                out.append(self.logits(xb).data.argmax(axis=-1))
        return np.concatenate(out)


def accuracy(model: Model, split: Split) -> float:
    pred = model.predict(split.x)
    return float(np.mean(pred == split.y.reshape(-1)))


def dataset_loss(model: Model, split: Split, batch: int = 256) -> float:
    """Mean cross-entropy of ``model`` over a whole split."""
    n = len(split)
    total = 0.0
    with ag.paused():
        for i in range(0, n, batch):
            part = split.batch(np.arange(i, min(i + batch, n)))
            labels = part.y.reshape(-1)
            total += ag.cross_entropy(model.logits(part.x), labels).item() * len(labels)
    return total / split.y.size


def _step(model: Model, batch: Split):
    with ag.Tape() as tape:
        logits = model.logits(batch.x)
        with ag.origin("head"):
            loss = ag.cross_entropy(logits, batch.y.reshape(-1))
    grads = ag.backward(tape, loss)
    return tape, loss, grads


@dataclass
class TrainResult:
    model: Model
    report: RunReport
    step_losses: list[float] = field(default_factory=list)


def train(strategy: Strategy, backbone: Backbone, task: Domain, config: TrainConfig,
          n_classes: int, *, echo: dict | None = None) -> TrainResult:
    """Fit ``strategy`` on the ``task`` domain and return the model plus its report."""
    if strategy.kind != "FullFT" and any(t.requires_grad for t in backbone.params.values()):
        raise ConfigError(f"{strategy.kind} needs a frozen backbone")
    t0 = time.perf_counter()
    model = Model(strategy, backbone, n_classes, seed=config.seed)
    named = model.trainable()
    opt = AdamW([t for _, t in named], config.learning_rate, (config.adam_beta1, config.adam_beta2),
                weight_decay=config.weight_decay)
    registry = model.registry()
    frozen = model.frozen_names()
    frozen_tensors = [registry[k] for k in sorted(frozen)]
    n_train = len(task.train)
    rng = np.random.default_rng([config.seed, 11])

    probe = task.train.batch(np.arange(min(config.batch_size, n_train)))
    tape, _, grads = _step(model, probe)
    ledger = audit_memory(tape, opt.params, frozen_tensors)
    audit = audit_gradients(grads, registry, frozen, model.last_inputs)
    del tape

    per_epoch = -(-n_train // config.batch_size)
    total = per_epoch * config.epochs
    epochs, losses = [], []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_train)
        ep_losses = []
        for i in range(0, n_train, config.batch_size):
            batch = task.train.batch(order[i:i + config.batch_size])
            _, loss, grads = _step(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericDivergenceError(step, value)
            audit = audit.merge(audit_gradients(grads, registry, frozen, model.last_inputs))
            opt.step(grads, lr_at(step, total, config.learning_rate, config.warmup))
            ep_losses.append(value)
            step += 1
        losses += ep_losses
        epochs.append({"epoch": epoch + 1, "train_loss": float(np.mean(ep_losses)),
                       "val_acc": accuracy(model, task.val)})
        log.debug("%s epoch %d: %s", strategy.label, epoch + 1, epochs[-1])

    final = {"val_acc": accuracy(model, task.val), "test_acc": accuracy(model, task.test),
             "train_loss": epochs[-1]["train_loss"] if epochs else None}
    flops = None
    if model.adapter is not None:
        flops = count_flops(model.adapter.config).to_dict()
    config_echo = {"strategy": strategy.to_dict(), "train": asdict(config),
                   "backbone": backbone_spec_dict(backbone.spec), "n_classes": n_classes}
    config_echo.update(echo or {})
    report = RunReport(
        config=config_echo,
        epochs=epochs,
        final=final,
        memory=ledger.to_dict(),
        audit=audit.to_dict(),
        flops=flops,
        seed=config.seed,
        n_trainable_params=int(sum(t.size for _, t in named)),
        wall_time=time.perf_counter() - t0,
    )
    return TrainResult(model, report, losses)


def backbone_spec_dict(spec: BackboneSpec) -> dict:
    d = asdict(spec)
    d["drop_mask"] = sorted(spec.drop_mask)
    d["stage_channels"] = list(spec.stage_channels)
    return d


def backbone_spec_from_dict(data) -> BackboneSpec:
    data = dict(data)
    data["drop_mask"] = frozenset(data.get("drop_mask", ()))
    data["stage_channels"] = tuple(data.get("stage_channels", (8, 16, 32, 64)))
    return BackboneSpec(**data)


def pretrain(backbone: Backbone, source: Domain, config: TrainConfig, n_classes: int) -> Backbone:
    """Fully fine-tune a copy of ``backbone`` on the source domain and return it frozen."""
    if config.epochs == 0:
        return backbone
    result = train(Strategy("FullFT"), backbone, source, config, n_classes)
    fitted = result.model.backbone
    fitted.set_trainable(False)
    return fitted


# --------------------------------------------------------------------------
# experiments

@dataclass(frozen=True)
class Experiment:
    """Everything needed to reproduce one training run from a seed."""

    backbone: BackboneSpec = BackboneSpec()
    task: TaskSpec = TaskSpec()
    strategy: Strategy = Strategy()
    train: TrainConfig = TrainConfig()
    pretrain: TrainConfig | None = None
    weights: str | None = None

    def with_seed(self, seed: int) -> "Experiment":
        pre = None if self.pretrain is None else replace(self.pretrain, seed=seed)
        return replace(self, backbone=replace(self.backbone, seed=seed), task=replace(self.task, seed=seed),
                       train=replace(self.train, seed=seed), pretrain=pre)

    def to_dict(self) -> dict:
        from .config import experiment_to_dict
        return experiment_to_dict(self)


def prepare(exp: Experiment, cache: dict | None = None) -> tuple[Backbone, Domain, Domain]:
    """Backbone (pre-fitted on the source domain when requested) and the task domains."""
    key = (exp.backbone, exp.task, exp.pretrain, exp.weights)
    if cache is not None and key in cache:
        return cache[key]
    source, target = generate_task(exp.task)
    backbone = build(exp.backbone)
    if exp.weights:
        from .weights import load_weights
        backbone.load_state(load_weights(exp.weights))
    if exp.pretrain is not None and exp.pretrain.epochs > 0:
        backbone = pretrain(backbone, source, exp.pretrain, exp.task.n_classes)
    out = (backbone, source, target)
    if cache is not None:
        cache[key] = out
    return out


def run_experiment(exp: Experiment, cache: dict | None = None) -> TrainResult:
    """Train ``exp``; SHERL on an encoder-decoder also records the insertion audit."""
    backbone, _, target = prepare(exp, cache)
    echo = {"experiment": exp.to_dict()}
    if exp.strategy.kind == "SHERL" and isinstance(backbone, EncDecBackbone):
        s = exp.strategy
        return insertion_experiment(backbone, s.insertion, target, exp.train, exp.task.n_classes,
                                    s.aggregator, s.reduction, echo=echo)
    return train(exp.strategy, backbone, target, exp.train, exp.task.n_classes, echo=echo)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SHERL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class AblationRow:
    label: str
    strategy: dict
    reduction: int
    seeds: list[int]
    accs: list[float]
    n_params: int
    retained_bytes: int
    backbone_retained: int
    audit_passed: bool = True

    @property
    def mean(self) -> float:
        return float(np.mean(self.accs))

    @property
    def spread(self) -> tuple[float, float]:
        return float(np.min(self.accs)), float(np.max(self.accs))

    @property
    def std(self) -> float:
        return float(np.std(self.accs))

    def to_dict(self) -> dict:
        lo, hi = self.spread
        return {"label": self.label, "strategy": self.strategy, "reduction": self.reduction,
                "seeds": self.seeds, "accs": self.accs, "mean_acc": self.mean, "min_acc": lo,
                "max_acc": hi, "std_acc": self.std, "n_params": self.n_params,
                "retained_bytes": self.retained_bytes, "backbone_retained": self.backbone_retained,
                "audit_passed": self.audit_passed}


def ablate(grid: Sequence[Strategy], base: Experiment, seeds: Sequence[int],
           threads: int | None = None) -> list[AblationRow]:
    """Train every strategy of ``grid`` once per seed on the shared setup."""
    if not grid:
        raise ConfigError("ablation grid is empty")
    seeds = list(seeds)
    cache: dict = {}
    for seed in seeds:  # pre-fit backbones once per seed, serially
        prepare(base.with_seed(seed), cache)
    jobs = [(s, seed) for s in grid for seed in seeds]

    def one(job):
        strategy, seed = job
        exp = replace(base.with_seed(seed), strategy=strategy)
        return run_experiment(exp, cache).report

    threads = threads or worker_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            reports = list(pool.map(one, jobs))
    else:
        reports = [one(j) for j in jobs]
    rows = []
    for i, strategy in enumerate(grid):
        cell = reports[i * len(seeds):(i + 1) * len(seeds)]
        mem = cell[0].memory
        rows.append(AblationRow(strategy.label, strategy.to_dict(), strategy.reduction, seeds,
                                [r.final["test_acc"] for r in cell], cell[0].n_trainable_params,
                                mem["total_retained"], mem["backbone_retained"],
                                all(r.audit["passed"] for r in cell)))
    return rows


def insertion_experiment(backbone: EncDecBackbone, pattern: Insertion, task: Domain,
                         config: TrainConfig, n_classes: int, aggregator: str = "MTSA",
                         reduction: int = 8, echo: dict | None = None) -> TrainResult:
    """Train SHERL with a decoder-side insertion pattern and audit every inserted layer.

    The report's ``extras`` lists, per inserted decoder layer, whether the
    blended input of that layer received a nonzero gradient.
    """
    if not isinstance(backbone, EncDecBackbone):
        raise ConfigError("insertion experiments run on encoder-decoder backbones")
    pattern.start(backbone.n_layers)
    strategy = Strategy("SHERL", aggregator, pattern, reduction)
    result = train(strategy, backbone, task, config, n_classes, echo=echo)
    model = result.model
    probe = task.train.batch(np.arange(min(config.batch_size, len(task.train))))
    with ag.Tape() as tape:
        logits = model.logits(probe.x)
        with ag.origin("head"):
            loss = ag.cross_entropy(logits, probe.y.reshape(-1))
    decoder_mixed = model.last_mixed[1:]
    grads = ag.backward(tape, loss, wrt=decoder_mixed)
    paths = [bool(np.any(grads.get(m, 0.0) != 0.0)) for m in decoder_mixed]
    result.report.extras["insertion"] = {
        "pattern": str(pattern),
        "inserted_layers": len(decoder_mixed),
        "gradient_paths": paths,
        "backbone_layers_retained": audit_memory(tape).backbone_layers(),
    }
    return result
