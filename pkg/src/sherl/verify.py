"""Self-verification suites behind ``sherl verify``.

Each check returns ``(passed, detail)``.  ``inject_fault`` deliberately
unfreezes one backbone weight before the gradient audits run, which must make
the memory suite fail.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autograph as ag
from .accountant import audit_gradients, audit_memory, count_flops, instrumented_aggregation
from .backbones import BackboneSpec, build
from .config import emit_experiment, parse_experiment
from .harness import Experiment, Model, Strategy, TrainConfig, run_experiment, train
from .mtsa import AGGREGATORS, Insertion, MtsaConfig, aggregate, aggregate_variant, init_params, \
    mtsa_forward, redundancy_rate
from .optim import AdamW
from .report import RunReport, dumps, validate
from .tasks import TaskSpec, generate_task
from .weights import dumps_weights, loads_weights

SUITES = ("gradcheck", "invariants", "memory")
GRADCHECK_TOL = 1e-5
EXACT_TOL = 1e-9


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str


# --------------------------------------------------------------------------
# gradcheck

def random_gradcheck_case(aggregator: str, rng: np.random.Generator):
    """Random small adapter problem: returns (loss_fn, parameter list, sizes)."""
    k = int(rng.integers(1, 7))
    n = int(rng.integers(2, 5))
    if aggregator == "MHSA":
        d, heads = 4, 4
    else:
        d, heads = int(rng.integers(1, 6)), 4
    r = int(rng.integers(1, 3))
    big_d = d * r
    dims = tuple(int(x) for x in rng.integers(2, 7, size=n - 1)) + (big_d,)
    cfg = MtsaConfig(dims, big_d, r, tokens=k, aggregator=aggregator, heads=heads)
    params = init_params(cfg, rng)
    params.alpha.data[...] = rng.uniform(-0.1, 0.1)
    if params.learnable_r is not None:
        params.learnable_r.data[:] = rng.uniform(0.5, 2.0, size=n - 1)
    hidden = [ag.constant(rng.normal(size=(k, dn))) for dn in dims]
    original = ag.constant(rng.normal(size=(k, big_d)))
    probe = rng.normal(size=(k, big_d))

    def loss():
        mixed = mtsa_forward(hidden, original, cfg, params)
        return ag.sum(ag.mul(mixed, ag.constant(probe)))

    return loss, params.tensors(), (k, n, d)


def gradcheck_variant(aggregator: str, configs: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, AGGREGATORS.index(aggregator)])
    worst = 0.0
    for _ in range(configs):
        loss, params, _ = random_gradcheck_case(aggregator, rng)
        worst = max(worst, ag.grad_check(loss, params))
    return worst


def _gradcheck_checks():
    def make(agg):
        def check():
            err = gradcheck_variant(agg)
            return err <= GRADCHECK_TOL, f"max relative error {err:.2e} over 20 configs"
        return check
    return [(f"gradcheck {agg}", make(agg)) for agg in AGGREGATORS]


# --------------------------------------------------------------------------
# invariants

def identity_at_init(family: str, seed: int = 0) -> bool:
    """SHERL with a zero gate reproduces the frozen backbone output bit for bit."""
    kinds = {"transformer": "tokens", "cnn": "images", "encdec": "seq2seq"}
    spec = BackboneSpec(family=family, seed=seed)
    bb = build(spec)
    _, target = generate_task(TaskSpec(kind=kinds[family], n_train=8, n_val=1, n_test=1, seed=seed))
    x = target.train.x
    model = Model(Strategy("SHERL"), bb, 4, seed=seed)
    with ag.paused():
        expected = bb.forward(x).data
        got = model.features(x).data
    return bool(np.array_equal(expected, got))


def _rate(rows: np.ndarray) -> np.ndarray:
    return redundancy_rate(ag.constant(rows)).rate.data


def redundancy_law_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    errs = {"bounds": 0.0, "orthogonal": 0.0, "identical": 0.0, "scale": 0.0}
    for _ in range(50):
        m, d = int(rng.integers(1, 6)), int(rng.integers(1, 7))
        rows = rng.normal(size=(m, d))
        rate = _rate(rows)
        errs["bounds"] = max(errs["bounds"], float(np.max(np.maximum(np.maximum(1 - rate, rate - m), 0.0))))
        errs["scale"] = max(errs["scale"], float(np.max(np.abs(_rate(rows * rng.uniform(0.1, 10, (m, 1))) - rate))))
        same = np.repeat(rng.normal(size=(1, d)), m, axis=0)
        errs["identical"] = max(errs["identical"], float(np.max(np.abs(_rate(same) - m))))
        if m <= d:
            q, _ = np.linalg.qr(rng.normal(size=(d, d)))
            ortho = q[:m] * rng.uniform(0.5, 2.0, size=(m, 1))
            errs["orthogonal"] = max(errs["orthogonal"], float(np.max(np.abs(_rate(ortho) - 1))))
    return errs


def cohort_blend(aggregator: str, counts: tuple[int, ...], d: int = 4, seed: int = 0) -> np.ndarray:
    """Blend of a fixed guidance over orthogonal unit cohorts repeated ``counts`` times."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    guidance = np.abs(rng.normal(size=d)) @ q.T  # positive projections on every cohort direction
    rows = np.concatenate([np.repeat(q[:, i:i + 1].T, c, axis=0) for i, c in enumerate(counts)])
    g = ag.constant(guidance.reshape(1, d))
    e = ag.constant(rows)
    if aggregator == "MTSA":
        return aggregate(g, e, redundancy_rate(e).rate).blended.data
    return aggregate_variant(aggregator, g, e, None).data


def cohort_differences() -> tuple[float, float]:
    """(max MTSA change, LinearA change) when cohort sizes vary."""
    ref_m, ref_l = cohort_blend("MTSA", (1, 1)), cohort_blend("LinearA", (1, 1))
    worst_m = 0.0
    for counts in [(1, 3), (4, 1), (2, 5), (3, 3)]:
        worst_m = max(worst_m, float(np.max(np.abs(cohort_blend("MTSA", counts) - ref_m))))
    diff_l = float(np.max(np.abs(cohort_blend("LinearA", (1, 4)) - ref_l)))
    return worst_m, diff_l


def flops_checks(seed: int = 0) -> tuple[float, bool]:
    rng = np.random.default_rng(seed)
    ratios, matches = [], True
    for _ in range(5):
        n, r = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, 7))
        cfg = MtsaConfig((d * r,) * n, d * r, r, tokens=k)
        ratios.append(count_flops(cfg, 2 * k).aggregation_flops / count_flops(cfg, k).aggregation_flops)
        guidance = np.abs(rng.normal(size=(k, d))) + 0.1
        early = np.abs(rng.normal(size=(k, n - 1, d))) + 0.1
        blended, counted = instrumented_aggregation(guidance, early)
        matches &= counted == count_flops(cfg).aggregation_flops
        e = ag.constant(early)
        ref = aggregate(ag.constant(guidance[:, None, :]), e, redundancy_rate(e).rate).blended.data
        matches &= bool(np.allclose(blended, ref, rtol=1e-12, atol=1e-12))
    return max(abs(x - 2.0) for x in ratios), matches


def _tiny_experiment(seed: int = 1) -> Experiment:
    return Experiment(
        backbone=BackboneSpec(n_layers=3, seed=seed),
        task=TaskSpec(n_train=64, n_val=32, n_test=32, redundancy_stress=True, seed=seed),
        train=TrainConfig(epochs=2, seed=seed),
    )


def _invariant_checks():
    def identity(family):
        return lambda: (identity_at_init(family), "output bit-identical to frozen backbone")

    def laws():
        errs = redundancy_law_errors()
        return max(errs.values()) <= EXACT_TOL, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())

    def cohorts():
        m, lin = cohort_differences()
        return m <= EXACT_TOL and lin > 1e-3, f"MTSA change {m:.1e}, LinearA change {lin:.3f}"

    def flops():
        dev, ok = flops_checks()
        return dev <= EXACT_TOL and ok, f"doubling deviation {dev:.1e}, instrumented match {ok}"

    def roundtrips():
        rng = np.random.default_rng(0)
        state = {"a.w": rng.normal(size=(3, 4)).astype(np.float32).astype(np.float64),
                 "b": np.float32(rng.normal(size=5)).astype(np.float64), "s": np.array(1.5)}
        back = loads_weights(dumps_weights(state))
        w_ok = all(np.array_equal(state[k], back[k]) for k in state) and set(back) == set(state)
        exp = _tiny_experiment()
        c_ok = parse_experiment(emit_experiment(exp)) == exp
        rep = run_experiment(replace(exp, train=replace(exp.train, epochs=1))).report
        data = json.loads(dumps(rep.to_dict()))
        validate(data)
        r_ok = RunReport.from_dict(data) == rep
        return w_ok and c_ok and r_ok, f"weights {w_ok}, config {c_ok}, report {r_ok}"

    def determinism():
        exp = _tiny_experiment()
        a = run_experiment(exp).report.metrics_json()
        b = run_experiment(exp).report.metrics_json()
        return a == b, "metrics sections byte-identical" if a == b else "metrics differ"

    def frozen_after_training():
        exp = _tiny_experiment()
        bb = build(exp.backbone)
        before = bb.state()
        _, target = generate_task(exp.task)
        for kind in ("SHERL", "LinearProbe"):
            train(Strategy(kind), bb, target, exp.train, exp.task.n_classes)
        same = all(np.array_equal(before[k], v) for k, v in bb.state().items())
        return same, "backbone bit-identical after SHERL and LinearProbe"

    return [
        ("identity at init (transformer)", identity("transformer")),
        ("identity at init (cnn)", identity("cnn")),
        ("identity at init (encdec)", identity("encdec")),
        ("redundancy-rate laws", laws),
        ("cohort duplication invariance", cohorts),
        ("aggregation flops", flops),
        ("file round trips", roundtrips),
        ("run determinism", determinism),
        ("frozen backbone untouched", frozen_after_training),
    ]


# --------------------------------------------------------------------------
# memory and gradient flow

def ledger_for(strategy: Strategy, n_layers: int = 12, seed: int = 3, batch: int = 32):
    bb = build(BackboneSpec(n_layers=n_layers, seed=seed))
    _, target = generate_task(TaskSpec(n_train=batch, seed=seed))
    b = target.train
    model = Model(strategy, bb, 4, seed=seed)
    with ag.Tape() as tape:
        ag.cross_entropy(model.logits(b.x), b.y)
    return audit_memory(tape)


def audit_probe(strategy: Strategy, inject_fault: bool = False, seed: int = 0):
    """Gradient audit of one step; ``inject_fault`` unfreezes one backbone weight."""
    bb = build(BackboneSpec(n_layers=4, seed=seed))
    _, target = generate_task(TaskSpec(n_train=16, seed=seed))
    model = Model(strategy, bb, 4, seed=seed)
    if inject_fault:
        model.backbone.params["layer3.mlp.fc1.w"].requires_grad = True
    b = target.train
    with ag.Tape() as tape:
        loss = ag.cross_entropy(model.logits(b.x), b.y)
    grads = ag.backward(tape, loss)
    audit = audit_gradients(grads, model.registry(), model.frozen_names(), model.last_inputs,
                            raise_on_violation=False)
    opt = AdamW([t for _, t in model.trainable()])
    ledger = audit_memory(tape, opt.params)
    return audit, ledger, opt, model


def _memory_checks(inject_fault: bool):
    def ratio():
        full = ledger_for(Strategy("FullFT")).backbone_retained
        std = ledger_for(Strategy("SHERL")).backbone_retained
        value = std / full
        return value <= 1 / 12 + 0.02, f"backbone retained ratio {value:.4f} (bound {1 / 12 + 0.02:.4f})"

    def multi_monotone():
        full = ledger_for(Strategy("FullFT")).backbone_retained
        values = [ledger_for(Strategy("SHERL", insertion=Insertion("multi", p))).backbone_retained
                  for p in (12, 10, 8, 6)]
        ok = all(a < b for a, b in zip(values, values[1:])) and values[-1] < full
        return ok, f"retained {values} < FullFT {full}"

    def audits():
        details = []
        ok = True
        for kind in ("SHERL", "LinearProbe", "FullFT"):
            audit, ledger, opt, model = audit_probe(Strategy(kind), inject_fault and kind == "SHERL")
            ok &= audit.passed and ledger.trainable_param_bytes == opt.update_bytes
            if kind == "FullFT":
                ok &= not audit.params_without_grad
            else:
                ok &= not any(n.startswith("backbone.") for n in audit.params_with_grad)
            details.append(f"{kind}: {'pass' if audit.passed else audit.violations[0]}")
        return ok, "; ".join(details)

    def teeth():
        audit, *_ = audit_probe(Strategy("SHERL"), inject_fault=True)
        return not audit.passed, "injected fault detected" if not audit.passed else "injected fault missed"

    return [
        ("memory ratio (12-layer)", ratio),
        ("multi-layer interpolation", multi_monotone),
        ("gradient audit", audits),
        ("audit fault injection", teeth),
    ]


def suite_checks(suite: str, inject_fault: bool = False) -> list[tuple[str, Callable]]:
    if suite == "gradcheck":
        return _gradcheck_checks()
    if suite == "invariants":
        return _invariant_checks()
    if suite == "memory":
        return _memory_checks(inject_fault)
    raise ValueError(f"unknown suite {suite!r}")


def run_suite(suite: str, inject_fault: bool = False, report: Callable[[CheckResult], None] | None = None):
    names = SUITES if suite == "all" else (suite,)
    results = []
    for name in names:
        for label, check in suite_checks(name, inject_fault):
            try:
                passed, detail = check()
            except Exception as exc:  # a crashing check is a failing check
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            res = CheckResult(name, label, bool(passed), detail)
            results.append(res)
            if report is not None:
                report(res)
    return results
