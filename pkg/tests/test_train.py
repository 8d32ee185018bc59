import numpy as np
import pytest

from xpra_unrolled import autodiff as ad
from xpra_unrolled.prior import PriorConfig
from xpra_unrolled.rng import Xoshiro256
from xpra_unrolled.scene import SceneConfig
from xpra_unrolled.train import (
    CLAMP_FLOOR, Adam, TrainConfig, TrainingDivergedError, make_optimizer, predict, train,
)
from xpra_unrolled.unrolled import LinearSystem, TvModel, UnrolledModel, build_model, model_parameters
from xpra_unrolled.xpra import assemble_kernel
from xpra_unrolled import xpra

CFG = PriorConfig(levels=1, channels=4)


@pytest.fixture(scope="module")
def toy():
    cfg = SceneConfig(node_count=10, inverse_nx=8, inverse_ny=8)
    sysm = LinearSystem.build(assemble_kernel(cfg))
    rng = np.random.default_rng(0)
    truths = np.zeros((6, 8, 8))
    for k in range(6):
        r, c = rng.integers(1, 5, size=2)
        truths[k, r:r + 3, c:c + 3] = 0.2
    states = np.concatenate([np.zeros((6, 64)), truths.reshape(6, 64)], axis=1)
    dp = xpra.predict(sysm.op, states) + 0.05 * rng.normal(size=(6, sysm.op.A.shape[0]))
    return sysm, dp, truths


def _snapshot(model):
    return [p.value.copy() for p in model_parameters(model)]


def test_zero_learning_rate_is_identity(toy):
    sysm, dp, truths = toy
    model = UnrolledModel(sysm, layers=2, prior_config=CFG, seed=3)
    before = _snapshot(model)
    res = train(model, sysm, dp[:1], truths[:1], TrainConfig(epochs=1, batch_size=1, lr_reg=0.0, lr_other=0.0))
    assert len(res.losses) == 1
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model_parameters(model)))


def test_adam_clamps_scalars():
    p = ad.Tensor(np.array(1e-3), requires_grad=True, name="lam")
    p.grad = np.array(1.0)
    opt = Adam([([p], 1.0)], clamped=[p])
    opt.step()
    assert float(p.value) == CLAMP_FLOOR and opt.state.step == 1


def _loss(model, sysm, dp, truths):
    out = model.forward(sysm, ad.Tensor(dp), train=True)
    return ad.mse_loss(out, truths)


def _active_model(sysm):
    model = UnrolledModel(sysm, layers=2, prior_config=CFG, seed=4)
    rng = np.random.default_rng(1)
    for net in model.priors:
        net.out_w.value = 0.1 * rng.normal(size=net.out_w.shape)
    return model


@pytest.mark.parametrize("which", ["lam1_1", "eta_1", "lam1_0", "lam2_2"])
def test_end_to_end_scalar_gradient(toy, which):
    sysm, dp, truths = toy
    model = _active_model(sysm)
    p = next(t for t in model_parameters(model) if t.name == which)
    with ad.Tape() as tape:
        (g,) = tape.backward(_loss(model, sysm, dp, truths), wrt=[p])
    v0 = float(p.value)
    h = 1e-5 * abs(v0)
    vals = []
    for v in (v0 + h, v0 - h):
        p.value = np.array(v)
        vals.append(float(_loss(model, sysm, dp, truths).value))
    p.value = np.array(v0)
    num = (vals[0] - vals[1]) / (2 * h)
    assert abs(float(g) - num) <= 1e-4 * abs(num)


def test_all_gradients_finite(toy):
    sysm, dp, truths = toy
    model = _active_model(sysm)
    params = model_parameters(model)
    with ad.Tape() as tape:
        grads = tape.backward(_loss(model, sysm, dp, truths), wrt=params)
    assert all(np.all(np.isfinite(g)) for g in grads)


def test_nan_aborts_with_diagnostics(toy):
    sysm, dp, truths = toy
    bad = dp.copy()
    bad[0, 0] = np.nan
    model = UnrolledModel(sysm, layers=2, prior_config=CFG)
    with pytest.raises(TrainingDivergedError) as exc:
        train(model, sysm, bad, truths, TrainConfig(epochs=1, batch_size=6))
    assert exc.value.diagnostics and exc.value.diagnostics[0][0] == "init"


def test_training_deterministic_and_improves(toy):
    sysm, dp, truths = toy
    runs = []
    for _ in range(2):
        model = build_model("tk-dprior", sysm, layers=2, prior_config=CFG, seed=5)
        res = train(model, sysm, dp, truths, TrainConfig(epochs=4, batch_size=2, seed=9))
        runs.append((res.losses, _snapshot(model), predict(model, sysm, dp)))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))
    assert np.array_equal(runs[0][2], runs[1][2])
    assert runs[0][0][-1] < runs[0][0][0]


def test_parameter_groups():
    cfg = SceneConfig(node_count=6, inverse_nx=4, inverse_ny=4)
    sysm = LinearSystem.build(assemble_kernel(cfg))
    model = UnrolledModel(sysm, layers=2, prior_config=CFG)
    opt = make_optimizer(model, TrainConfig())
    (reg, lr_reg), (other, lr_other) = opt.groups
    assert lr_reg == 1e-2 and lr_other == 1e-4
    assert {p.name for p in reg} == {"lam1_0", "lam2_0", "lam1_1", "lam2_1", "lam1_2", "lam2_2"}
    assert {"eta_1", "eta_2", "prior1.alpha"} <= {p.name for p in other}
    tv = TvModel(sysm)
    assert [p.name for p in make_optimizer(tv, TrainConfig()).groups[0][0]] == ["lam_tv", "rho"]


def test_resume_matches_uninterrupted(toy):
    sysm, dp, truths = toy
    full = build_model("tk-dprior", sysm, layers=1, prior_config=CFG, seed=6)
    ref = train(full, sysm, dp, truths, TrainConfig(epochs=3, batch_size=3, seed=2))
    part = build_model("tk-dprior", sysm, layers=1, prior_config=CFG, seed=6)
    rng = Xoshiro256(2)
    first = train(part, sysm, dp, truths, TrainConfig(epochs=1, batch_size=3, seed=2), rng=rng)
    rest = train(part, sysm, dp, truths, TrainConfig(epochs=3, batch_size=3, seed=2),
                 optimizer=first.optimizer, start_epoch=1, rng=rng)
    assert first.losses + rest.losses == ref.losses
    assert all(np.array_equal(a, p.value) for a, p in zip(_snapshot(full), model_parameters(part)))
