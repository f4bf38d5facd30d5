import numpy as np
import pytest

import oracles
from tswatermark import lm, losses as L, trainer as TR
from tswatermark.errors import ConfigurationError, InputError, TrainingAborted


def test_mgda_examples():
    assert TR.mgda_lambda([1, 0], [0, 1]) == pytest.approx(0.5)
    assert TR.mgda_lambda([1, 2], [1, 2]) == 1.0
    assert TR.mgda_lambda([1, 0], [2, 0]) == 1.0
    np.testing.assert_array_equal(TR.combine_gradients([1, 0], [2, 0], 1.0), [1, 0])
    assert TR.mgda_lambda([2, 0], [1, 0]) == 0.0
    assert TR.mgda_lambda([0, 0], [0, 0]) == 0.5
    with pytest.raises(InputError):
        TR.mgda_lambda([1, 0], [1, 0, 0])


def test_mgda_optimal_against_grid():
    rng = np.random.default_rng(0)
    for i in range(20):
        n = int(rng.integers(10, 10_001))
        gD = rng.standard_normal(n) * rng.uniform(0.1, 10)
        gS = rng.standard_normal(n) * rng.uniform(0.1, 10) + rng.uniform(-1, 1) * gD
        lam = TR.mgda_lambda(gD, gS)
        assert 0.0 <= lam <= 1.0
        norm = np.linalg.norm(TR.combine_gradients(gD, gS, lam))
        _, best = oracles.grid_min_norm_lambda(gD, gS, step=1e-4)
        assert norm <= best + 1e-9
        g = TR.combine_gradients(gD, gS, lam)
        gg = g @ g
        assert g @ gD >= gg - 1e-9 and g @ gS >= gg - 1e-9


def test_combine_and_weighted_sum():
    np.testing.assert_allclose(TR.combine_gradients([1, 0], [0, 1], 0.5), [0.5, 0.5])
    np.testing.assert_array_equal(TR.combine_gradients([1, 0], [0, 1], 0.0), [0, 1])
    with pytest.raises(InputError):
        TR.combine_gradients([1], [1], 1.5)
    np.testing.assert_array_equal(TR.weighted_sum_grad([1, 0], [0, 1], 0.0), [0, 1])
    np.testing.assert_allclose(TR.weighted_sum_grad([1, 0], [0, 1], 4e-4), [4e-4, 1.0])
    assert TR.lambda_ws_from_moo(0.5) == 1.0
    with pytest.raises(InputError):
        TR.weighted_sum_grad([1], [1], -1.0)


def test_adam():
    st = TR.AdamState.zeros(3)
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([3.0, -1e-3, 0.0])
    out = TR.adam_step(p, g, st, 1e-2)
    np.testing.assert_allclose(out - p, [-1e-2, 1e-2, 0.0], atol=1e-7)
    st2 = TR.AdamState.zeros(3)
    st2.m[:] = 1.0
    st2.v[:] = 1.0
    st2.step = 5
    q = TR.adam_step(p, np.zeros(3), st2, 1e-2)
    np.testing.assert_allclose(st2.m, 0.9)
    np.testing.assert_allclose(st2.v, 0.999)
    assert np.all(q < p)  # leftover momentum still moves; moments decay
    st3 = TR.AdamState.zeros(3)
    np.testing.assert_array_equal(TR.adam_step(p, np.zeros(3), st3, 1e-2), p)
    with pytest.raises(TrainingAborted):
        TR.adam_step(p, np.array([np.nan, 0, 0]), TR.AdamState.zeros(3), 1e-2)
    with pytest.raises(InputError):
        TR.adam_step(p, np.zeros(2), TR.AdamState.zeros(3), 1e-2)


def test_select_checkpoint():
    V = TR.ValPoint
    assert TR.select_checkpoint([V(1, 0.5), V(2, 0.6), V(3, 0.4)]) == 1
    assert TR.select_checkpoint([V(1, 0.5), V(1, 0.5)]) == 0
    assert TR.select_checkpoint([V(0, 1.0), V(1, 0.0)]) == 0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(tau=-1)
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TR.TrainConfig(mode="SGD")
    with pytest.raises(ConfigurationError):
        TR.TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigurationError):
        TR.split_prompts([], 1, 1, 0)


def _short_run(model, mode="MGDA", lam=4e-4, steps=4):
    emb = L.make_embedder(8, 16, 0)
    prompts = lm.make_prompts(model, 24, 5, 0)
    tr, va = TR.split_prompts(prompts, 16, 4, 0)
    g, d = TR.init_pair(0.25, 1.25, 0, 8, hidden=8)
    cfg = TR.TrainConfig(batch_size=4, epochs=2, lr=1e-3, gen_length=20, checkpoint_every=2,
                         mode=mode, lambda_ws=lam, max_steps=steps)
    with pytest.raises(ConfigurationError):
        TR.train(cfg, model, [], va, g, d, 1, emb)
    return TR.train(cfg, model, tr, va, g, d, 1, emb)


def test_training_is_deterministic_and_logs(small_model):
    a = _short_run(small_model)
    b = _short_run(small_model)
    np.testing.assert_array_equal(a.final_params, b.final_params)
    assert [c.step for c in a.checkpoints] == [2, 4]
    assert len(a.log) == 4
    for rec in a.log:
        assert 0.0 <= rec["lambda"] <= 1.0
        assert rec["norm_g_D"] > 0 and rec["norm_g_S"] >= 0
    assert a.selected_checkpoint is a.checkpoints[a.selected]
    w = _short_run(small_model, mode="WEIGHTED_SUM")
    assert all(rec["lambda"] is None for rec in w.log)
    assert not np.array_equal(w.final_params, a.final_params)


@pytest.mark.slow
def test_weighted_sum_zero_does_not_lose_similarity(model512):
    emb = L.make_embedder(32, 16, 0)
    prompts = lm.make_prompts(model512, 300, 20, 0)
    tr, va = TR.split_prompts(prompts, 240, 60, 0)
    g, d = TR.init_pair(0.25, 1.25, 0, 32)
    seeds = lm.derive_seeds(0, 60, stream=1)
    init, _ = TR.evaluate_pair(model512, g, d, 42, va, 100, seeds, emb)
    cfg = TR.TrainConfig(batch_size=8, epochs=2, lr=1e-3, gen_length=100, checkpoint_every=30,
                         mode="WEIGHTED_SUM", lambda_ws=0.0)
    res = TR.train(cfg, model512, tr, va, g, d, 42, emb)
    cos = [init.mean_cos] + [c.val.mean_cos for c in res.checkpoints]
    assert all(b >= a - 0.02 for a, b in zip(cos, cos[1:]))
    assert cos[-1] > cos[0]
