import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sherl import autograph as ag
from sherl import mtsa
from sherl.errors import ConfigError, ContractError, DimensionError
from sherl.mtsa import Adapter, Insertion, MtsaConfig

from helpers import mtsa_reference


def _setup(n=3, k=4, big_d=8, r=2, aggregator="MTSA", seed=0, batch=None):
    rng = np.random.default_rng(seed)
    dims = tuple(int(x) for x in rng.integers(3, 7, size=n - 1)) + (big_d,)
    cfg = MtsaConfig(dims, big_d, r, tokens=k, aggregator=aggregator, heads=2)
    params = mtsa.init_params(cfg, rng)
    lead = () if batch is None else (batch,)
    hidden = [ag.constant(rng.normal(size=lead + (k, dn))) for dn in dims]
    original = ag.constant(rng.normal(size=lead + (k, big_d)))
    return cfg, params, hidden, original


def test_forward_matches_reference():
    cfg, params, hidden, original = _setup(n=4, k=5)
    params.alpha.data[...] = 0.07
    got = mtsa.mtsa_forward(hidden, original, cfg, params).data
    ref = mtsa_reference([h.data for h in hidden], original.data,
                         [w.data for w in params.down_w], [b.data for b in params.down_b],
                         [w.data for w in params.enhance_W], [w.data for w in params.enhance_Wp],
                         params.up_w.data, params.up_b.data, float(params.alpha.data))
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_batched_forward_equals_per_example():
    cfg, params, hidden, original = _setup(batch=3)
    params.alpha.data[...] = 0.05
    full = mtsa.mtsa_forward(hidden, original, cfg, params).data
    for b in range(3):
        one = mtsa.mtsa_forward([ag.constant(h.data[b]) for h in hidden], ag.constant(original.data[b]),
                                cfg, params).data
        np.testing.assert_allclose(full[b], one, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("aggregator", mtsa.AGGREGATORS)
def test_zero_gate_is_identity(aggregator):
    cfg, params, hidden, original = _setup(aggregator=aggregator)
    out = mtsa.mtsa_forward(hidden, original, cfg, params)
    np.testing.assert_array_equal(out.data, original.data)
    assert mtsa.gate_value(params) == 0.0


def test_gate_value_uses_temperature():
    cfg, params, *_ = _setup()
    params.alpha.data[...] = 0.05
    assert mtsa.gate_value(params, 0.1) == pytest.approx(np.tanh(0.5))


def test_stage_shapes_and_regroup_roundtrip():
    cfg, params, hidden, _ = _setup(n=4, k=5, batch=2)
    f = mtsa.down_project(hidden, params)
    assert all(t.shape == (2, 5, cfg.hidden_dim) for t in f)
    projected = mtsa.enhance_and_gate(f, params)
    assert all(np.all((g.data > 0) & (g.data < 1)) for g in projected.gates)
    groups = mtsa.regroup(projected.enhanced)
    assert groups.guidance.shape == (2, 5, 1, cfg.hidden_dim)
    assert groups.early.shape == (2, 5, 3, cfg.hidden_dim)
    back = mtsa.ungroup(groups)
    for a, b in zip(back, projected.enhanced):
        np.testing.assert_array_equal(a.data, b.data)


def test_enhancement_formula():
    cfg, params, hidden, _ = _setup()
    f = mtsa.down_project(hidden, params)
    out = mtsa.enhance_and_gate(f, params)
    fn = f[0].data
    gate = 1 / (1 + np.exp(-(fn @ params.enhance_W[0].data)))
    np.testing.assert_allclose(out.enhanced[0].data, gate * (fn @ params.enhance_Wp[0].data + fn))


def test_aggregate_with_zero_scores_passes_guidance():
    guidance = ag.constant(np.array([[1.0, 0.0]]))
    early = ag.constant(np.array([[-1.0, 0.0], [0.0, 1.0]]))  # scores rectify to zero
    out = mtsa.aggregate(guidance, early, mtsa.redundancy_rate(early).rate)
    np.testing.assert_array_equal(out.blended.data, [1.0, 0.0])
    np.testing.assert_array_equal(out.weights.data, [0.0, 0.0])


def test_aggregate_weights_sum_to_one():
    rng = np.random.default_rng(3)
    guidance = ag.constant(np.abs(rng.normal(size=(4, 1, 3))))
    early = ag.constant(np.abs(rng.normal(size=(4, 5, 3))))
    out = mtsa.aggregate(guidance, early, mtsa.redundancy_rate(early).rate)
    np.testing.assert_allclose(out.weights.data.sum(axis=-1), 1.0)


def test_aggregate_shape_errors():
    g = ag.constant(np.ones((1, 3)))
    e = ag.constant(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        mtsa.aggregate(ag.constant(np.ones((2, 3))), e, ag.constant(np.ones(2)))
    with pytest.raises(DimensionError):
        mtsa.aggregate(g, e, ag.constant(np.ones(3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_redundancy_rate_bounds(m, d, seed):
    rows = np.random.default_rng(seed).normal(size=(m, d))
    rate = mtsa.redundancy_rate(ag.constant(rows)).rate.data
    assert np.all(rate >= 1 - 1e-12) and np.all(rate <= m + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.floats(0.01, 100), st.integers(0, 10_000))
def test_redundancy_rate_scale_invariant(m, d, c, seed):
    rows = np.random.default_rng(seed).normal(size=(m, d))
    a = mtsa.redundancy_rate(ag.constant(rows)).rate.data
    b = mtsa.redundancy_rate(ag.constant(rows * c)).rate.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_redundancy_rate_limits():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    np.testing.assert_allclose(mtsa.redundancy_rate(ag.constant(q[:4])).rate.data, 1.0, atol=1e-12)
    same = np.tile([1.0, 2.0, -1.0], (4, 1))
    np.testing.assert_allclose(mtsa.redundancy_rate(ag.constant(same)).rate.data, 4.0, atol=1e-12)
    # anti-correlated rows are rectified away
    anti = np.array([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(mtsa.redundancy_rate(ag.constant(anti)).rate.data, 1.0)


@pytest.mark.parametrize("aggregator", mtsa.AGGREGATORS)
def test_variants_produce_d_vectors(aggregator):
    cfg, params, hidden, original = _setup(aggregator=aggregator, batch=2)
    params.alpha.data[...] = 0.1
    mixed, trace = mtsa.mtsa_forward(hidden, original, cfg, params, return_trace=True)
    assert mixed.shape == original.shape
    assert trace.blended.shape == (2, 4, cfg.hidden_dim)
    assert (trace.redundancy is not None) == (aggregator == "MTSA")


def test_pooling_variants_formula():
    g = ag.constant(np.array([[0.5, 0.5]]))
    e = ag.constant(np.array([[1.0, 3.0], [2.0, -1.0]]))
    np.testing.assert_allclose(mtsa.aggregate_variant("MaxPool", g, e, None).data, [2.5, 3.5])
    np.testing.assert_allclose(mtsa.aggregate_variant("AvePool", g, e, None).data, [2.0, 1.5])


def test_linear_a_r_at_ones_equals_linear_a():
    cfg, params, hidden, original = _setup(aggregator="LinearA_r")
    g = ag.constant(np.abs(np.random.default_rng(1).normal(size=(1, 4))))
    e = ag.constant(np.abs(np.random.default_rng(2).normal(size=(2, 4))))
    a = mtsa.aggregate_variant("LinearA", g, e, params).data
    b = mtsa.aggregate_variant("LinearA_r", g, e, params).data
    np.testing.assert_allclose(a, b)


def test_detached_contract():
    cfg, params, hidden, original = _setup()
    attached = ag.parameter(original.data)
    with pytest.raises(ContractError):
        mtsa.mtsa_forward(hidden, attached, cfg, params)
    with ag.Tape():
        out = mtsa.mtsa_forward(hidden, attached, cfg, params, allow_attached=True)
    assert out.requires_grad


def test_prefix_of_sources_accepted():
    cfg, params, hidden, original = _setup(n=4)
    params.alpha.data[...] = 0.1
    out = mtsa.mtsa_forward(hidden[:3], original, cfg, params)
    assert out.shape == original.shape
    with pytest.raises(ConfigError):
        mtsa.mtsa_forward(hidden[:1], original, cfg, params)


def test_source_width_mismatch():
    cfg, params, hidden, original = _setup()
    bad = [ag.constant(np.ones((4, 99)))] + hidden[1:]
    with pytest.raises(ConfigError):
        mtsa.mtsa_forward(bad, original, cfg, params)


def test_only_adapter_origin_recorded():
    cfg, params, hidden, original = _setup()
    with ag.Tape() as tape:
        mtsa.mtsa_forward(hidden, original, cfg, params)
    assert set(tape.retained_bytes_by_origin) == {"mtsa"}


@pytest.mark.parametrize("kwargs", [
    dict(source_dims=(4,), model_dim=8),
    dict(source_dims=(4, 8), model_dim=8, reduction=3),
    dict(source_dims=(4, 8), model_dim=8, aggregator="Softmax"),
    dict(source_dims=(4, 8), model_dim=8, reduction=4, aggregator="MHSA", heads=4),
    dict(source_dims=(4, 8), model_dim=8, gate_temperature=0.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        MtsaConfig(**kwargs)


def test_parameter_count_closed_form():
    dims, big_d, r = (5, 6, 8), 8, 2
    d = big_d // r
    p = mtsa.init_params(MtsaConfig(dims, big_d, r))
    expected = sum((dn + 1) * d for dn in dims) + len(dims) * 2 * d * d + (d + 1) * big_d + 1
    assert p.n_parameters == expected
    names = [n for n, _ in p.named()]
    assert len(names) == len(set(names)) and "mtsa.alpha" in names


def test_init_deterministic_and_zero_gate():
    cfg = MtsaConfig((4, 8), 8, 2)
    a, b = mtsa.init_params(cfg, 5), mtsa.init_params(cfg, 5)
    for (_, x), (_, y) in zip(a.named(), b.named()):
        np.testing.assert_array_equal(x.data, y.data)
    assert float(a.alpha.data) == 0.0 and np.all(a.up_b.data == 0)


def test_insertion_parsing_and_range():
    assert Insertion.parse("multi@3") == Insertion("multi", 3)
    assert str(Insertion.parse(" single @ 2")) == "single@2"
    assert Insertion().start(6) == 6
    with pytest.raises(ConfigError):
        Insertion("multi", 7).start(6)
    with pytest.raises(ConfigError):
        Insertion("single", 1).start(6)
    with pytest.raises(ConfigError):
        Insertion("single")
    with pytest.raises(ConfigError):
        Insertion("sideways")


def test_adapter_wrapper():
    cfg, params, hidden, original = _setup()
    adapter = Adapter(cfg, params)
    np.testing.assert_array_equal(adapter(hidden, original).data, original.data)
    assert adapter.gate == 0.0
    assert Adapter.create(cfg, 0).params.n_parameters == params.n_parameters
