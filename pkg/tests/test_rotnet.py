"""Hadamard rotation: construction, folding, equivalence, outlier dispersion."""
import numpy as np
import pytest
import scipy.linalg

from voltsim import rotnet
from voltsim.errmodel import RngStream
from voltsim.qgemm import calibrate_bound
from voltsim.rotnet import (
    DegenerateInputError,
    RotationStateError,
    UnsupportedModelError,
    apply_rotation,
    fold_norm_gains,
    hadamard,
    make_plan,
    outlier_profile,
    residual_profiles,
)
from voltsim.tinynn import (
    ControllerModel,
    PlannerModel,
    RunContext,
    TransformerSpec,
)

SPEC = TransformerSpec(
    n_layers=2, hidden_dim=32, n_heads=4, mlp_dim=32,
    vocab_size=16, norm="rms", max_seq=12, causal=True,
)
LN_SPEC = TransformerSpec(
    n_layers=2, hidden_dim=32, n_heads=4, mlp_dim=32,
    vocab_size=0, norm="layer", max_seq=10, causal=False,
)


def fresh_planner(seed=1):
    return PlannerModel.init(SPEC, RngStream(seed, ("rot",)))


def rand_prompts(n, gen, lo=2, hi=10):
    return [gen.integers(0, SPEC.vocab_size, size=int(gen.integers(lo, hi)))
            for _ in range(n)]


# ---------------------------------------------------------------- hadamard

def test_order_two_matches_definition():
    h = hadamard(2).entries
    assert np.allclose(h, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-15)


def test_orthogonality_all_orders():
    for n in (2, 4, 8, 16, 32, 64, 128, 256):
        h = hadamard(n).entries
        err = np.max(np.abs(h @ h.T - np.eye(n)))
        assert err < 1e-12, n
        assert np.allclose(np.abs(h), 1 / np.sqrt(n)), n


def test_order_four_against_scipy_sign_pattern():
    h = hadamard(4)
    oracle = scipy.linalg.hadamard(4).astype(float) / 2.0
    assert np.allclose(h.entries, oracle, atol=1e-15)


def test_rejects_bad_orders():
    for bad in (0, 1, 3, 6, 12, 100):
        with pytest.raises(ValueError):
            hadamard(bad)


def test_norm_preservation():
    gen = np.random.default_rng(2)
    h = hadamard(64).entries
    for _ in range(20):
        x = gen.normal(size=64) * gen.uniform(0.1, 50)
        assert abs(np.linalg.norm(x @ h) - np.linalg.norm(x)) < 1e-10 * np.linalg.norm(x)


# ------------------------------------------------------------ gain folding

def test_fold_identity_gains_change_nothing():
    model = fresh_planner()
    folded = fold_norm_gains(model)
    for k in model.params:
        assert np.array_equal(folded.params[k], model.params[k]), k
    assert folded.flags["gain_folded"]


def test_fold_doubled_gains_double_following_rows():
    model = fresh_planner()
    model.params["l0.ln1.g"][:] = 2.0
    folded = fold_norm_gains(model)
    assert np.allclose(folded.params["l0.q"], 2.0 * model.params["l0.q"])
    assert np.allclose(folded.params["l0.ln1.g"], 1.0)
    gen = np.random.default_rng(3)
    for ids in rand_prompts(4, gen):
        a = model.fp_forward(ids)
        b = folded.fp_forward(ids)
        assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(a))


def test_fold_random_gains_preserve_function():
    model = fresh_planner()
    gen = np.random.default_rng(4)
    for i in range(SPEC.n_layers):
        model.params[f"l{i}.ln1.g"][:] = gen.uniform(0.3, 3.0, size=32)
        model.params[f"l{i}.ln2.g"][:] = gen.uniform(0.3, 3.0, size=32)
    model.params["final.g"][:] = gen.uniform(0.3, 3.0, size=32)
    folded = fold_norm_gains(model)
    for ids in rand_prompts(8, gen):
        a = model.fp_forward(ids)
        b = folded.fp_forward(ids)
        assert np.max(np.abs(a - b)) <= 1e-6 * np.max(np.abs(a))


def test_fold_rejects_layernorm_model():
    model = ControllerModel.init(LN_SPEC, RngStream(5, ("ln",)))
    with pytest.raises(UnsupportedModelError):
        fold_norm_gains(model)


# ---------------------------------------------------------------- rotation

def test_rotation_requires_folded_gains():
    model = fresh_planner()
    plan = make_plan(model)
    with pytest.raises(RotationStateError, match="folded"):
        apply_rotation(model, plan)


def test_rotation_weight_identity():
    model = fold_norm_gains(fresh_planner())
    rot = apply_rotation(model, make_plan(model))
    h = hadamard(SPEC.hidden_dim).entries
    for name, side in make_plan(model).targets:
        w = rot.params[name]
        back = h @ w if side == "left" else w @ h.T
        assert np.max(np.abs(back - model.params[name])) < 1e-12, name


def test_rotation_preserves_function_end_to_end():
    model = fold_norm_gains(fresh_planner())
    rot = apply_rotation(model, make_plan(model))
    gen = np.random.default_rng(6)
    for ids in rand_prompts(32, gen):
        a = model.fp_forward(ids)
        b = rot.fp_forward(ids)
        assert np.max(np.abs(a - b)) <= 1e-5 * np.max(np.abs(a))


def test_rotation_preserves_greedy_decode():
    model = fold_norm_gains(fresh_planner())
    rot = apply_rotation(model, make_plan(model))
    gen = np.random.default_rng(7)
    for ids in rand_prompts(20, gen, lo=2, hi=6):
        a = model.fp_decode(ids, max_new=5, eos_id=0)
        b = rot.fp_decode(ids, max_new=5, eos_id=0)
        assert a == b


def test_double_rotation_rejected():
    model = fold_norm_gains(fresh_planner())
    rot = apply_rotation(model, make_plan(model))
    with pytest.raises(RotationStateError, match="already"):
        apply_rotation(rot, make_plan(rot))


def test_rotation_rejects_layernorm_model():
    model = ControllerModel.init(LN_SPEC, RngStream(8, ("ln2",)))
    model.flags["gain_folded"] = True  # forced; fold itself refuses
    plan = make_plan(model)
    with pytest.raises(UnsupportedModelError):
        apply_rotation(model, plan)


# ---------------------------------------------------------- outlier profile

def test_profile_uniform_tensor():
    p = outlier_profile(np.ones(128))
    assert p.ratio == pytest.approx(1.0)


def test_profile_single_spike():
    x = np.ones(4096)
    x[123] = 100.0
    p = outlier_profile(x)
    assert p.max_abs == 100.0
    assert p.median_abs == 1.0
    assert p.ratio == pytest.approx(100.0)


def test_profile_spike_disperses_under_rotation():
    h = hadamard(4096).entries
    # a lone spike spreads its energy exactly: 100/sqrt(4096) per channel
    x = np.zeros(4096)
    x[123] = 100.0
    spread = np.abs(x @ h)
    assert np.allclose(spread, 100.0 / 64.0)
    # on a sign-varying unit background the profiled ratio collapses
    gen = np.random.default_rng(11)
    x = gen.choice([-1.0, 1.0], size=4096)
    x[123] = 100.0
    p = outlier_profile(x @ h)
    assert p.ratio < 5.0


def test_constant_background_concentrates_instead():
    # an all-ones background is itself a Hadamard row: its DC component
    # lands in a single output channel, so the profiled ratio stays high.
    # rotation only disperses what varies in sign across channels.
    x = np.ones(4096)
    x[123] = 100.0
    h = hadamard(4096).entries
    p = outlier_profile(x @ h)
    assert p.ratio > 40.0


def test_profile_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        outlier_profile(np.zeros(64))
    with pytest.raises(DegenerateInputError):
        outlier_profile(np.array([]))


# --------------------------------------------------------------- synergy

def test_calibrated_bound_tightens_after_rotation():
    # a planted writer-column outlier inflates the O-site bound; rotation
    # disperses the column so the re-calibrated bound shrinks
    model = fresh_planner(seed=9)
    c = 13
    for i in range(SPEC.n_layers):
        model.params[f"l{i}.o"][:, c] *= 40.0
        model.params[f"l{i}.down"][:, c] *= 40.0
    model.invalidate_qweights()
    folded = fold_norm_gains(model)
    rot = apply_rotation(folded, make_plan(folded))
    gen = np.random.default_rng(10)
    prompts = rand_prompts(16, gen)

    def o_site_bound(m):
        run = RunContext(capture={})
        for ids in prompts:
            m.q_forward(np.asarray(ids), run)
        return calibrate_bound(run.capture["l0.o"], margin=1.0).threshold_dequant

    t_plain = o_site_bound(folded)
    t_rot = o_site_bound(rot)
    assert t_rot < t_plain
    # residual stream outliers visible before, dispersed after
    prof_plain = residual_profiles(folded, prompts)
    prof_rot = residual_profiles(rot, prompts)
    assert prof_plain["l1.ln1"].ratio > 10
    assert prof_rot["l1.ln1"].ratio < prof_plain["l1.ln1"].ratio
