import math

import numpy as np
import pytest

from dso2d import datagen as dg
from dso2d import evalkit as ek
from dso2d.align import DsoConfig
from dso2d.checkpoint import ModelCheckpoint
from dso2d.errors import InputError
from dso2d.geometry import decode_shape
from dso2d.nn import MlpModel


@pytest.fixture(scope="module")
def prompts():
    return dg.build_eval_prompts(n_objects=4, prompts_per_object=2, seed=11)


def _perfect(prompts):
    recs = [dg.RolloutRecord(p.prompt_id, 0, p.gt_latent.copy(), p.cond, True, 0) for p in prompts]
    return dg.label(recs)


def test_perfect_generator(prompts):
    rep = ek.report_from_rollouts(_perfect(prompts), prompts, seed=0)
    assert rep.pct_output == 100.0 and rep.pct_stable == 100.0
    # a stable ground truth may rest up to 20 degrees off upright; the perfect stub inherits that
    assert rep.mean_rot_deg == pytest.approx(np.mean([p.gt_tilt for p in prompts]), abs=1e-12)
    assert rep.mean_cd < 0.01 and rep.mean_fscore > 99.0
    assert len(rep.per_prompt) == len(prompts) and len(rep.per_sample) == len(prompts)


def test_nan_generator(prompts):
    model = MlpModel.init(16, 16, (8,), time_dim=4)
    model.layers[-1].bias.data[...] = np.nan
    rep = ek.evaluate(ModelCheckpoint(model), prompts, seed=0)
    assert rep.pct_output == 0.0
    assert rep.pct_stable is None and rep.mean_cd is None and rep.mean_rot_deg is None


def test_denominators(prompts):
    recs = _perfect(prompts)
    recs[0] = dg.RolloutRecord(recs[0].prompt_id, 0, np.full(16, np.nan), recs[0].cond, False, 0, None, 0)
    tall = dg.family_by_name("tower").latent({"half_width": 0.2, "half_height": 1.1, "lean": 0.7})
    recs[1] = dg.label([dg.RolloutRecord(recs[1].prompt_id, 0, tall, recs[1].cond, True, 0)])[0]
    assert recs[1].o == 0
    rep = ek.report_from_rollouts(recs, prompts, seed=0)
    n = len(prompts)
    assert rep.pct_output == pytest.approx(100.0 * (n - 1) / n)
    assert rep.pct_stable == pytest.approx(100.0 * (n - 2) / (n - 1))
    assert rep.mean_rot_deg == pytest.approx(np.mean([r.tilt_deg for r in recs[1:]]))


def test_report_requires_ground_truth():
    synth = dg.build_synthetic_prompts(n=2, seed=0)
    recs = [dg.RolloutRecord(p.prompt_id, 0, np.zeros(16), p.cond, True, 0, 0.0, 1) for p in synth]
    with pytest.raises(InputError):
        ek.report_from_rollouts(recs, synth, seed=0)


def test_evaluate_is_pure(prompts):
    ck = ModelCheckpoint(MlpModel.init(16, 16, (16,), time_dim=4, seed=1))
    a = ek.evaluate(ck, prompts, seed=3)
    b = ek.evaluate(ck, prompts, seed=3)
    assert a.to_dict() == b.to_dict()
    assert a.model_hash == ck.content_hash()


def test_geometry_scores_invariant_to_placement():
    z = np.random.default_rng(0).normal(size=16)
    p = decode_shape(z)
    moved = 3.0 * p + [5.0, -2.0]
    np.testing.assert_allclose(ek.geometry_scores(moved, p, seed=1), ek.geometry_scores(p, p, seed=1), atol=1e-12)
    cd, fs = ek.geometry_scores(p, p, seed=1)
    assert 0.0 <= fs <= 100.0 and cd < 0.01


def test_correlation():
    x = np.arange(10.0)
    assert ek.correlation(x, 2 * x + 1)[0] == pytest.approx(1.0)
    assert ek.correlation(x, -x)[0] == pytest.approx(-1.0)
    with pytest.raises(InputError):
        ek.correlation([1, 2], [3, 4])
    with pytest.raises(InputError):
        ek.correlation(x, np.ones(10))


def test_csv_is_schema_stable():
    rows = [{"value": 1.5, "axis": "x", "extra": 9}, {"axis": "y"}]
    text = ek.to_csv(("axis", "value"), rows)
    assert text == "axis,value\nx,1.5\ny,\n"


def test_sweep_rejects_bad_values(prompts):
    ck = ModelCheckpoint(MlpModel.init(16, 16, (8,), time_dim=4))
    with pytest.raises(InputError):
        ek.sweep("steps", [2, 1], ck, [], DsoConfig(), prompts)
    with pytest.raises(InputError):
        ek.sweep("lr", [1, 2], ck, [], DsoConfig(), prompts)


def test_small_sweeps_and_partial_results(prompts):
    model = MlpModel.init(16, 16, (16,), time_dim=4, seed=2)
    base = ModelCheckpoint(model)
    train = dg.build_eval_prompts(n_objects=4, prompts_per_object=2, seed=12, prefix="train")
    recs = dg.label(dg.rollout(model, None, train, k=2, seed=1))
    cfg = DsoConfig(steps=4, batch_size=4, lr=1e-3, warmup_steps=1, seed=1)
    res = ek.sweep("steps", [1, 2, 4], base, recs, cfg, prompts, seed=0)
    assert [v for v, _ in res.points] == [1, 2, 4] and not res.errors
    text = res.to_csv()
    assert text.splitlines()[0] == ",".join(ek.SWEEP_HEADER)
    assert text == ek.sweep("steps", [1, 2, 4], base, recs, cfg, prompts, seed=0).to_csv()
    data = ek.sweep("data", [0.25, 1.0], base, recs, cfg, prompts, seed=0)
    assert all(rep is not None for _, rep in data.points)
    dpo = DsoConfig(objective="dpo", steps=2, batch_size=2, lr=1e-3, warmup_steps=1, beta=1.0, seed=1)
    only_stable = [r for r in recs if r.o == 1]
    part = ek.sweep("data", [0.5, 1.0], base, only_stable, dpo, prompts, seed=0)
    assert all(rep is None for _, rep in part.points)
    assert all(row["status"].startswith("error: InputError") for row in part.rows())


def test_perturbation_eval_on_slabs():
    slab = dg.family_by_name("slab")
    latents = [slab.latent({"half_width": w, "half_height": 0.3}) for w in (0.9, 1.1, 1.3)]
    rows = ek.perturbation_eval(latents, runs=30, seed=2)
    assert [r["theta_max"] for r in rows] == list(ek.PERTURB_THETAS)
    assert all(r["stability_rate"] == 1.0 for r in rows)
    assert rows == ek.perturbation_eval(latents, runs=30, seed=2, workers=2)
    with pytest.raises(InputError):
        ek.perturbation_eval(latents, thetas=(0.0,))


def test_flat_cut_baseline(prompts):
    recs = _perfect(prompts)
    rows = ek.flat_cut_baseline_eval(recs, prompts, seed=0)
    assert [r["z"] for r in rows] == [0.0, *ek.CUT_HEIGHTS]
    uncut = ek.report_from_rollouts(recs, prompts, seed=0)
    assert rows[0]["mean_cd"] == pytest.approx(uncut.mean_cd)
    assert all(r["mean_cd"] != rows[0]["mean_cd"] for r in rows[1:])
    assert rows[0]["pct_stable"] == 100.0


def test_perfect_upright_generator_has_zero_rot():
    slab = dg.family_by_name("slab")
    zs = [slab.latent({"half_width": w, "half_height": 0.3}) for w in (0.9, 1.2)]
    prompts = [dg.PromptRecord(f"s{i}", z, "slab", f"s{i}", z, True, 0.0) for i, z in enumerate(zs)]
    recs = dg.label([dg.RolloutRecord(p.prompt_id, 0, p.gt_latent, p.cond, True, 0) for p in prompts])
    rep = ek.report_from_rollouts(recs, prompts, seed=0)
    assert rep.mean_rot_deg == 0.0 and rep.pct_stable == 100.0 and rep.mean_fscore == 100.0


def test_cutting_a_flat_bottom_keeps_stability():
    slab = dg.family_by_name("slab")
    z = slab.latent({"half_width": 1.2, "half_height": 0.4})
    p = dg.PromptRecord("s", z, "slab", "s", z, True, 0.0)
    rec = dg.label([dg.RolloutRecord("s", 0, z, z, True, 0)])
    rows = ek.flat_cut_baseline_eval(rec, [p], heights=(0.05,), seed=0)
    assert rows[0]["pct_stable"] == rows[1]["pct_stable"] == 100.0


def test_loss_curves():
    beta = 500.0
    grid = np.linspace(-10, 10, 201)
    rows = ek.loss_curves(beta, grid)
    assert all(r["dloss_linear"] == 1.0 for r in rows)
    zero = rows[100]
    assert zero["m"] == 0.0 and abs(zero["loss_dpo"] - math.log(2)) < 1e-15
    for r in rows:
        assert abs(r["dloss_dpo"] - r["dloss_dpo_closed_form"]) <= 1e-6 * max(r["dloss_dpo_closed_form"], 1e-300)
    near = ek.loss_curves(beta, [-10 / beta, -20 / beta])
    ratio = near[0]["dloss_dpo"] / near[1]["dloss_dpo"]
    closed = (1 + math.exp(20)) / (1 + math.exp(10))
    assert abs(ratio / closed - 1) < 1e-6
    assert abs(ratio / math.exp(10) - 1) < 1e-4
    deep = ek.loss_curves(beta, [-14 / beta, -30 / beta])
    for r in deep:
        assert abs(r["dloss_dpo"] / (beta * math.exp(-beta * abs(r["m"]))) - 1) < 1e-6
    with pytest.raises(InputError):
        ek.loss_curves(0.0, grid)


def test_comparison_table():
    rep = ek.EvalReport(100.0, None, None, None, None, 3, 0)
    table = ek.comparison_table([("Base", rep)])
    assert table.splitlines()[2] == "| Base | 100.0 | - | - | - | - |"
