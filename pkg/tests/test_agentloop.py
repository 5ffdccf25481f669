"""Vocabulary, plan corpus, planting mechanics, and the episode loop."""
import json

import numpy as np
import pytest

from voltsim.agentloop import (
    PLAN_MAX_LEN,
    EpisodeConfig,
    ModelBundle,
    Vocab,
    build_plan_corpus,
    plan,
    plan_cases,
    plan_prompt,
    plant_outliers,
    run_episode,
    satisfied_prefix,
    save_trace,
)
from voltsim.agentloop.planning import _plant_slices, _rms_inflation
from voltsim.dvs import VoltagePolicy
from voltsim.errmodel import RngStream, UniformBerModel
from voltsim.gridcraft import task_names, tasks
from voltsim.tinynn import (
    ControllerModel,
    EntropyPredictor,
    PlannerModel,
    TransformerSpec,
    calibrate_model,
)

# -------------------------------------------------------------- fixtures

PSPEC = TransformerSpec(n_layers=1, hidden_dim=32, n_heads=2, mlp_dim=64,
                        vocab_size=30, norm="rms", max_seq=48, causal=True)
CSPEC = TransformerSpec(n_layers=1, hidden_dim=32, n_heads=2, mlp_dim=64,
                        vocab_size=0, norm="layer", max_seq=10, causal=False)


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


@pytest.fixture(scope="module")
def tiny_bundle(vocab):
    # untrained models: episode mechanics do not care about plan quality
    planner = PlannerModel.init(PSPEC, RngStream(5, ("tiny-planner",)))
    controller = ControllerModel.init(CSPEC, RngStream(6, ("tiny-controller",)))
    return ModelBundle(planner, controller, vocab)


def _calibrated_copy(bundle, vocab):
    pl = PlannerModel(PSPEC, {k: v.copy() for k, v in bundle.planner.params.items()})
    pl.flags = dict(bundle.planner.flags)
    calibrate_model(pl, [[vocab.bos_id, 4, vocab.sep_id, vocab.resume_id]],
                    margin=4.0)
    ct = ControllerModel(CSPEC, {k: v.copy() for k, v in bundle.controller.params.items()})
    ct.flags = dict(bundle.controller.flags)
    g = np.random.default_rng(11)
    calibrate_model(ct, [(g.uniform(0, 1, (3, 15, 15)), g.normal(0, 1, 512))],
                    margin=4.0)
    return ModelBundle(pl, ct, vocab)


# -------------------------------------------------------------- vocab

def test_vocab_size_and_order(vocab):
    assert len(vocab.tokens) == 30
    assert vocab.tokens[:4] == ["<bos>", "<sep>", "<resume>", "<eos>"]
    # specials, then every task, then every subtask uid
    assert set(task_names()).issubset(vocab.tokens)


def test_vocab_roundtrip(vocab):
    for i, tok in enumerate(vocab.tokens):
        assert vocab.encode(tok) == i
        assert vocab.decode(i) == tok
    with pytest.raises(ValueError):
        vocab.encode("gather:vibranium:1")
    with pytest.raises(ValueError):
        vocab.decode(30)


def test_plan_prompt_shape(vocab):
    name = task_names()[0]
    recipe = [st.uid for st in tasks()[name].recipe]
    ids = plan_prompt(vocab, name, recipe[:2])
    want = [vocab.bos_id, vocab.encode(name), vocab.sep_id,
            vocab.encode(recipe[0]), vocab.encode(recipe[1]), vocab.resume_id]
    assert ids == want
    with pytest.raises(ValueError):
        plan_prompt(vocab, "not_a_task", ())


def test_corpus_counts_and_masks(vocab):
    corpus = build_plan_corpus(vocab)
    assert len(corpus) == 46  # one sequence per (task, satisfied prefix)
    per_task = sum(len(tasks()[n].recipe) + 1 for n in task_names())
    assert per_task == 46
    for ids, mask in corpus:
        assert ids[-1] == vocab.eos_id
        assert len(ids) == len(mask)
        r = list(ids).index(vocab.resume_id)
        assert not mask[: r + 1].any()      # prompt tokens carry no loss
        assert mask[r + 1:].all()           # completion is fully supervised
        assert 8 <= len(ids) <= 13


def test_satisfied_prefix_stops_at_first_gap():
    # iron_tool starts gather:wood then craft:plank; satisfying a later goal
    # without the earlier one must not extend the prefix
    name = "wooden_pickaxe"
    recipe = tasks()[name].recipe
    inv = {}
    assert satisfied_prefix(name, inv) == []
    g0 = recipe[0]
    inv = {g0.item: g0.count}
    assert satisfied_prefix(name, inv) == [g0.uid]
    # satisfy subtask 0 and 2 but not 1: prefix still stops after 0
    g2 = recipe[2]
    inv2 = {g0.item: g0.count, g2.item: g2.count}
    got = satisfied_prefix(name, inv2)
    if recipe[1].goal(inv2):  # overlapping items can legitimately chain
        pytest.skip("recipe goals overlap on this task")
    assert got == [g0.uid]


def test_plan_cases_cover_corpus(vocab):
    cases = plan_cases()
    assert len(cases) == 46
    assert len({(n, s) for n, s, _ in cases}) == 46
    for name, sat, want in cases:
        recipe = [st.uid for st in tasks()[name].recipe]
        assert list(sat) + list(want) == recipe


def test_plan_decodes_valid_tokens(vocab, tiny_bundle):
    out = plan(tiny_bundle.planner, vocab, task_names()[0])
    assert len(out) <= PLAN_MAX_LEN
    for tok in out:
        assert tok in vocab.tokens  # decode only emits vocabulary entries


# -------------------------------------------------------------- planting

def test_plant_alpha_one_is_identity(tiny_bundle):
    src = tiny_bundle.planner
    out = plant_outliers(src, channel=3, alpha=1.0)
    assert out is not src
    for k in src.params:
        assert np.array_equal(out.params[k], src.params[k])


def test_plant_rejects_bad_arguments(tiny_bundle):
    src = tiny_bundle.planner
    with pytest.raises(ValueError):
        plant_outliers(src, channel=3, alpha=5.0)  # 1 < alpha < 10
    with pytest.raises(ValueError):
        plant_outliers(src, channel=99, alpha=16.0)
    rot = PlannerModel(PSPEC, {k: v.copy() for k, v in src.params.items()})
    rot.flags = dict(src.flags)
    rot.flags["rotated"] = True
    with pytest.raises(ValueError):
        plant_outliers(rot, channel=3, alpha=16.0)


def test_plant_slices_cover_every_writer_and_gain(tiny_bundle):
    slices = _plant_slices(tiny_bundle.planner, 3)
    names = [n for n, _ in slices]
    assert names.count("embed") == 1 and names.count("pos") == 1
    for i in range(PSPEC.n_layers):
        assert f"l{i}.o" in names and f"l{i}.down" in names
        assert f"l{i}.ln1.g" in names and f"l{i}.ln2.g" in names
    assert "final.g" in names
    assert len(names) == 3 + 4 * PSPEC.n_layers


def test_rms_inflation_matches_direct_recompute(vocab, tiny_bundle):
    # at the first norm site the stream is embed+pos, so the predicted
    # growth factor can be recomputed from scratch
    planner = tiny_bundle.planner
    c, alpha = 3, 16.0
    corpus = build_plan_corpus(vocab)
    prompts = [ids for ids, _ in corpus[:5]]
    inflate = _rms_inflation(planner, prompts, c, alpha)
    ratios = []
    for ids in prompts:
        x = planner.params["embed"][np.asarray(ids)] + planner.params["pos"][: len(ids)]
        x2 = x.copy()
        x2[:, c] *= alpha
        rms = np.sqrt(np.mean(x * x, axis=-1))
        rms2 = np.sqrt(np.mean(x2 * x2, axis=-1))
        ratios.extend(rms2 / rms)
    assert inflate["l0.ln1"] == pytest.approx(float(np.mean(ratios)), rel=1e-9)
    assert all(v >= 1.0 for v in inflate.values())


# -------------------------------------------------------------- episodes

def test_forced_plan_mechanics(tiny_bundle):
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3,
                        forced_plan=("gather:stone:9",),
                        replan_after=10, fail_after=43)
    tr = run_episode(cfg, tiny_bundle, RngStream(99, ("ep",)))
    assert tr.outcome == "fail" and tr.steps == 43
    assert len(tr.records) == 43
    assert tr.replan_steps == [10, 20, 30, 40]
    # a forced plan never invokes the planner
    assert "planner" not in tr.ledger.totals()
    total = tr.ledger.energy()
    assert sum(r["energy"] for r in tr.records) == pytest.approx(total, rel=1e-12)


def test_step_records_are_conserved_under_replanning(tiny_bundle):
    # replans charge the planner; conservation must still hold exactly
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3,
                        replan_after=7, fail_after=30)
    tr = run_episode(cfg, tiny_bundle, RngStream(41, ("ep",)))
    assert all(s % 7 == 0 for s in tr.replan_steps)
    assert sum(r["energy"] for r in tr.records) == pytest.approx(
        tr.ledger.energy(), rel=1e-12)
    assert "planner" in tr.ledger.totals()


def test_zero_rate_protections_are_transparent(vocab, tiny_bundle):
    runs = {}
    for prot in ("none", "AD", "DMR"):
        b = _calibrated_copy(tiny_bundle, vocab) if prot == "AD" else tiny_bundle
        cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3, protection=prot,
                            forced_plan=("gather:stone:9",),
                            replan_after=30, fail_after=30)
        tr = run_episode(cfg, b, RngStream(99, ("ep",)))
        runs[prot] = [r["action"] for r in tr.records]
    assert runs["none"] == runs["AD"] == runs["DMR"]


def test_dmr_doubles_controller_ops_at_zero_rate(tiny_bundle):
    base = dict(task="wooden_pickaxe", world_seed=3,
                forced_plan=("gather:stone:9",),
                replan_after=12, fail_after=12)
    dmr = run_episode(
        EpisodeConfig(protection="DMR", controller_error=UniformBerModel(0.0),
                      **base),
        tiny_bundle, RngStream(99, ("ep",)))
    none = run_episode(EpisodeConfig(protection="none", **base),
                       tiny_bundle, RngStream(99, ("ep",)))
    assert dmr.ledger.ops("controller") == 2 * none.ledger.ops("controller")
    assert none.ledger.ops("controller") > 0


def test_config_validation(tiny_bundle):
    with pytest.raises(ValueError):
        EpisodeConfig(task="no_such_task", world_seed=0)
    with pytest.raises(ValueError):
        EpisodeConfig(task="wooden_pickaxe", world_seed=0, protection="shield")
    with pytest.raises(ValueError):
        EpisodeConfig(task="wooden_pickaxe", world_seed=0,
                      replan_after=100, fail_after=50)
    with pytest.raises(ValueError):
        EpisodeConfig(task="wooden_pickaxe", world_seed=0,
                      vs_policy=VoltagePolicy(voltages=(0.9,)))  # not VS
    with pytest.raises(ValueError):
        EpisodeConfig(task="wooden_pickaxe", world_seed=0, protection="AD+WR+VS")


def test_wr_protection_requires_rotated_planner(vocab, tiny_bundle):
    b = _calibrated_copy(tiny_bundle, vocab)
    pred = EntropyPredictor.init(RngStream(7, ("pred",)))
    pol = VoltagePolicy(voltages=(0.9, 0.8), thresholds=(1.0,))
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3,
                        protection="AD+WR+VS", vs_policy=pol,
                        replan_after=10, fail_after=10)
    bundle = ModelBundle(b.planner, b.controller, vocab, predictor=pred)
    with pytest.raises(ValueError):
        run_episode(cfg, bundle, RngStream(1, ("ep",)))


def test_ad_protection_requires_bounds(tiny_bundle):
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3, protection="AD",
                        controller_error=UniformBerModel(1e-4),
                        replan_after=10, fail_after=10)
    with pytest.raises(ValueError):
        run_episode(cfg, tiny_bundle, RngStream(1, ("ep",)))


def test_vs_holds_voltage_between_updates(vocab, tiny_bundle):
    from voltsim.rotnet import apply_rotation, fold_norm_gains, make_plan

    pl = fold_norm_gains(tiny_bundle.planner)
    pl = apply_rotation(pl, make_plan(pl))
    calibrate_model(pl, [[vocab.bos_id, 4, vocab.sep_id, vocab.resume_id]],
                    margin=4.0)
    ct = _calibrated_copy(tiny_bundle, vocab).controller
    pred = EntropyPredictor.init(RngStream(7, ("pred",)))
    pol = VoltagePolicy(voltages=(0.9, 0.8), thresholds=(-100.0,),
                        update_interval=5)
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3,
                        protection="AD+WR+VS", vs_policy=pol,
                        planner_error=UniformBerModel(1e-4),
                        controller_error=UniformBerModel(1e-6),
                        replan_after=10, fail_after=23)
    tr = run_episode(cfg, ModelBundle(pl, ct, vocab, predictor=pred),
                     RngStream(100, ("ep",)))
    volts = [r["voltage"] for r in tr.records]
    # the impossible threshold forces 0.8 V at step 0, then it never changes
    assert volts[0] == 0.8 and set(volts) == {0.8}
    assert tr.switch_latency_ns == 180.0
    assert "predictor" in tr.ledger.totals()
    for i, r in enumerate(tr.records):
        if i % pol.update_interval:
            assert r["voltage"] == tr.records[i - 1]["voltage"]


def test_trace_roundtrip(tmp_path, tiny_bundle):
    cfg = EpisodeConfig(task="wooden_pickaxe", world_seed=3,
                        forced_plan=("gather:stone:9",),
                        replan_after=12, fail_after=12)
    tr = run_episode(cfg, tiny_bundle, RngStream(99, ("ep",)))
    rec_path = tmp_path / "ep.ndjson"
    sum_path = tmp_path / "ep.json"
    save_trace(tr, rec_path, sum_path)
    rows = [json.loads(line) for line in rec_path.read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(12))
    summary = json.loads(sum_path.read_text())
    assert summary["schema_version"] == 1
    assert summary["outcome"] == tr.outcome
    assert summary["energy_total"] == pytest.approx(tr.ledger.energy())
