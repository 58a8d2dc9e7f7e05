"""Acceptance checks, one group per criterion; see the PASS/FAIL summary at the end of the run."""
import csv
import math
import time

import numpy as np
import pytest
import torch

from nimbus import autodiff as ad
from nimbus import experiments as ex
from nimbus.cnop import CnopConfig, CnopProblem, moist_energy_norm, project_ball, spg_maximize
from nimbus.gridio import (
    GridSpec,
    NormStats,
    StateTensor,
    avsf_read,
    avsf_write,
    latitude_weights,
    synth_generate,
)
from nimbus.model import Forecaster, ModelConfig, forward, load_checkpoint, rollout, save_checkpoint
from nimbus.objective import charbonnier_loss, focal_loss, mask_labels, total_loss
from nimbus.physics import ic_index, saturation_vapor_pressure, temperature_factor
from nimbus.trainer import TrainConfig, smoothed, train
from nimbus.verify import acc_latweighted, climatology, nrmse, rmse_latweighted
from test_autodiff import CASES

DESK = GridSpec.desk()
crit = pytest.mark.criterion


def es_scalar(tc):
    return 6.1094 * math.exp(17.625 * tc / (tc + 243.04))


def ic_scalar(t_k, q, p):
    tc = t_k - 273.15
    return 2.0 * (p * q / (0.622 * es_scalar(tc)) - 0.5) * (tc * (tc + 14.0) / -49.0)


# 1 ---------------------------------------------------------------------------

@crit(1)
def test_ic_formula_fidelity():
    start = time.perf_counter()
    assert saturation_vapor_pressure(0.0) == 6.1094
    assert temperature_factor(-7.0) == 1.0
    assert temperature_factor(0.0) == 0.0 and temperature_factor(-14.0) == 0.0
    spec = GridSpec.regular(3, 4, (850, 500), poles=False)
    v = np.zeros(spec.shape)
    v[spec.channels_of("t")] = 266.15
    v[spec.channels_of("q")] = np.array([0.622 * es_scalar(-7.0) / p for p in spec.levels])[:, None, None]
    sat = ic_index(StateTensor(spec, v, 0)).values
    assert np.abs(sat - 1.0).max() <= 1e-3
    assert np.abs(sat - ic_scalar(266.15, v[spec.channels_of("q")[0], 0, 0], 850.0)).max() <= 1e-3
    state = synth_generate(DESK, 2, 2)[1]
    ic = ic_index(state).values
    t, q = state.field("t").astype(np.float64), state.field("q").astype(np.float64)
    worst = 0.0
    for k, p in enumerate(DESK.levels):
        for i in range(DESK.n_lat):
            for j in range(DESK.n_lon):
                ref = ic_scalar(t[k, i, j], q[k, i, j], p)
                worst = max(worst, abs(ic[k, i, j] - ref) / max(abs(ref), 1e-300))
    assert worst <= 1e-12
    assert time.perf_counter() - start < 10


# 2 ---------------------------------------------------------------------------

@crit(2)
@pytest.mark.parametrize("lats", [DESK.latitudes, GridSpec.full().latitudes, np.linspace(89, -89, 37)])
def test_latitude_weights_sum(lats):
    assert abs(latitude_weights(lats).sum() - len(lats)) <= 1e-9


@crit(2)
def test_latitude_weights_three_rows():
    np.testing.assert_allclose(latitude_weights([60.0, 0.0, -60.0]), [0.75, 1.5, 0.75], rtol=0, atol=1e-12)


# 3 ---------------------------------------------------------------------------

@crit(3)
@pytest.mark.parametrize("op", sorted(CASES))
def test_primitive_gradients(op):
    for seed in range(5):
        x, f = CASES[op](np.random.default_rng(seed))
        assert x.dtype == torch.float64
        assert ad.grad_check(f, x) < 1e-4, seed


@crit(3)
def test_composite_loss_gradients():
    w = latitude_weights(np.linspace(70, -70, 6))
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p, t = (torch.as_tensor(rng.normal(size=(3, 6, 5))) for _ in range(2))
        z = torch.as_tensor(rng.normal(size=(2, 6, 5)) * 2)
        y = torch.as_tensor((rng.random((2, 6, 5)) < 0.3).astype(np.float64))
        assert ad.grad_check(lambda a: charbonnier_loss(a, t, w), p) < 1e-4
        assert ad.grad_check(lambda a: focal_loss(a, y), z) < 1e-4
        assert ad.grad_check(lambda a: total_loss((a, t), (z, y), w).total, p) < 1e-4
        assert ad.grad_check(lambda a: total_loss((p, t), (a, y), w).total, z) < 1e-4


@crit(3)
def test_two_step_cnop_objective_gradient():
    start = time.perf_counter()
    ds = synth_generate(DESK, 0, 8)
    model = Forecaster(ModelConfig(DESK), NormStats.from_dataset(ds), seed=0)
    prob = CnopProblem(model, ds.values[3].astype(np.float64), ds.values[4].astype(np.float64),
                       CnopConfig(lead_steps=2))
    z = np.random.default_rng(0).standard_normal(prob.size) * np.sqrt(0.6 / prob.size)
    _, g = prob.value_and_grad_delta(prob.to_delta(z))
    coords = list(np.argsort(-np.abs(g[prob.support]))[:10])
    sup, sc = torch.as_tensor(prob.support), torch.as_tensor(prob.scale)

    def f(zz):
        return prob.objective(torch.zeros(DESK.shape, dtype=ad.DTYPE).masked_scatter(sup, zz / sc))

    assert ad.grad_check(f, torch.as_tensor(z), h=1e-5, coords=coords) < 1e-4
    assert time.perf_counter() - start < 300


# 4 ---------------------------------------------------------------------------

@crit(4)
@pytest.mark.parametrize("variant", ["full", "no_ic"])
@pytest.mark.parametrize("seed", range(3))
def test_guide_loss_detached_from_backbone(variant, seed):
    ds = synth_generate(DESK, seed, 4)
    m = Forecaster(ModelConfig(DESK, variant=variant), NormStats.from_dataset(ds), seed=seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    x = torch.randn((2, 2) + DESK.shape, generator=gen, dtype=ad.DTYPE)
    labels = torch.as_tensor(np.stack([mask_labels(ds[i]).bits for i in (2, 3)]).astype(np.float64))
    loss = focal_loss(m(x[0], x[1]).mask_logits, labels)
    groups = m.parameter_groups()
    g = ad.backward(loss, groups["backbone"])
    assert g and all(np.count_nonzero(v) == 0 for v in g.values())
    g_head = ad.backward(focal_loss(m(x[0], x[1]).mask_logits, labels), groups["guide_head"])
    assert any(np.count_nonzero(v) for v in g_head.values())


# 5 ---------------------------------------------------------------------------

@crit(5)
def test_loss_identities():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6, 8))
    assert abs(float(charbonnier_loss(x, x, latitude_weights(np.linspace(60, -60, 6)), 1e-3)) - 1e-3) <= 1e-12
    assert float(focal_loss(torch.tensor([900.0, -900.0], dtype=ad.DTYPE), torch.tensor([1.0, 0.0]))) == 0.0
    z = rng.normal(size=200) * 3
    y = (rng.random(200) < 0.3).astype(float)
    p = 1 / (1 + np.exp(-z))
    ce = float(np.mean(-0.25 * (y * np.log(p) + (1 - y) * np.log(1 - p))))
    assert abs(float(focal_loss(z, y, gamma=0.0)) - ce) <= 1e-12
    lb = total_loss((x, x + 0.1), (z, y), np.ones(6))
    assert lb.lam == 1.0
    assert float(lb.total) == float(lb.forecast_loss) + 1.0 * float(lb.guide_loss)


# 6 ---------------------------------------------------------------------------

@crit(6)
def test_metrics_against_naive_references():
    rng = np.random.default_rng(0)
    lats = np.linspace(85, -85, 18)
    w = latitude_weights(lats)
    p, t, m = rng.normal(size=(3, 9, 18, 36))
    rm, ac = rmse_latweighted(p, t, w), acc_latweighted(p, t, m, w)
    for c in range(9):
        se = num = vp = vt = 0.0
        for i in range(18):
            for j in range(36):
                se += w[i] * (p[c, i, j] - t[c, i, j]) ** 2
                a, b = p[c, i, j] - m[c, i, j], t[c, i, j] - m[c, i, j]
                num, vp, vt = num + w[i] * a * b, vp + w[i] * a * a, vt + w[i] * b * b
        assert abs(rm[c] - math.sqrt(se / (18 * 36))) <= 1e-12
        assert abs(ac[c] - num / math.sqrt(vp * vt)) <= 1e-12
    spec = GridSpec(lats, np.arange(36) * 10.0, [500], ["a", "b", "c", "d", "e", "f", "g", "h", "i"])
    from nimbus.gridio import Dataset

    series = rng.normal(size=(5, 9, 18, 36))
    clim = climatology(Dataset(spec, series, 21600 * np.arange(5)))
    ref = np.zeros((9, 18, 36))
    for k in range(5):
        ref += series[k]
    assert np.abs(clim - ref / 5).max() <= 1e-12


@crit(6)
def test_nrmse_table_value():
    assert abs(nrmse(0.956, 1.059) - (-9.73)) <= 0.01


# 7 ---------------------------------------------------------------------------

@crit(7)
@pytest.mark.parametrize("seed", range(3))
def test_cnop_solver_on_quadratic(seed):
    start = time.perf_counter()
    a, xi = np.array([2.0, 1.0]), 0.6
    norms = []

    def vg(x):
        norms.append(float(np.linalg.norm(x)))
        return 0.5 * float(x @ (a * x)), a * x

    def proj(x):
        return project_ball(x, xi, lambda v: float(np.linalg.norm(v)), degree=1.0)

    x0 = np.random.default_rng(seed).normal(size=2) * 0.1
    res = spg_maximize(vg, x0, proj, k_max=50)
    assert abs(res.J - 0.36) <= 1e-6
    assert abs(abs(res.x[0]) - 0.6) <= 1e-4
    assert len(res.trace) <= 50
    assert max(norms) <= xi + 1e-12
    for _ in range(20):
        v = np.random.default_rng(seed + 100).normal(size=2) * 3
        once = proj(v)
        assert np.array_equal(proj(once), once)
    assert time.perf_counter() - start < 10


# 8 ---------------------------------------------------------------------------

@crit(8)
def test_moist_energy_norm_values():
    def uniform(name):
        d = np.zeros(DESK.shape)
        d[DESK.channels_of(name)] = 1.0
        return d

    assert moist_energy_norm(np.zeros(DESK.shape), DESK) == 0.0
    assert abs(moist_energy_norm(uniform("t"), DESK) - 1.85926) <= 1e-5
    assert moist_energy_norm(uniform("u"), DESK) == 0.5


# 9 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_cfg():
    return ex.load_config("desk.json")


@crit(9)
@pytest.mark.slow
def test_training_smoke(desk_cfg):
    assert desk_cfg.grid_spec().shape == (18, 32, 64)
    tc = desk_cfg.train_config()
    assert (tc.iterations, tc.batch, tc.lr0, tc.beta1, tc.beta2, tc.weight_decay) == (500, 4, 2.5e-4, 0.9, 0.95, 0.1)
    ds = ex.load_dataset(desk_cfg)
    start = time.perf_counter()
    model, hist = train(ds, desk_cfg.model_config(ds.spec), tc)
    elapsed = time.perf_counter() - start
    model2, hist2 = train(ds, desk_cfg.model_config(ds.spec), tc)
    loss = [r["total"] for r in hist]
    s = smoothed(loss)
    initial = float(np.mean(loss[:25]))
    print(f"\ntraining smoke: initial {initial:.4f}, final smoothed {s[-1]:.4f}, "
          f"ratio {s[-1] / initial:.3f}, {elapsed:.0f} s")
    assert s[-1] <= 0.5 * initial
    assert [r["total"] for r in hist2] == loss
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), model2.state_dict().values()))
    assert elapsed < 15 * 60


# 10 --------------------------------------------------------------------------

@crit(10)
@pytest.mark.slow
def test_ablation_ordering(desk_cfg, tmp_path):
    assert desk_cfg.ablation.seeds == [0, 1, 2] and desk_cfg.ablation.leads == 5
    start = time.perf_counter()
    res = ex.run_ablation(desk_cfg, tmp_path)
    elapsed = time.perf_counter() - start
    print(f"\nablation cloud scores (rows: seeds, cols: {res.variants}), {elapsed:.0f} s")
    print(np.array2string(res.cloud_score, precision=4))
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["Baseline", "w/o (MP, IC)", "w/o IC", "Full"]
    assert res.wins("full", "no_mp_ic") >= 2
    assert res.wins("no_mp_ic", "baseline") >= 2
    assert elapsed < 3600


# 11 --------------------------------------------------------------------------

@crit(11)
def test_desk_rollout():
    ds = synth_generate(DESK, 0, 4)
    stats = NormStats.from_dataset(ds)
    m = Forecaster(ModelConfig(DESK), stats, seed=0)
    x = torch.as_tensor((ds.values[:2].astype(np.float64) - stats.mean[None, :, None, None])
                        / stats.std[None, :, None, None])
    with torch.no_grad():
        seq = rollout(m, x[0], x[1], 28)
        (one,) = rollout(m, x[0], x[1], 1)
        ref = forward(m, x[0], x[1]).forecast
    assert len(seq) == 28
    assert all(s.shape == DESK.shape and torch.isfinite(s).all() for s in seq)
    assert seq[-1].shape == (DESK.n_channels, DESK.n_lat, DESK.n_lon) == (18, 32, 64)
    assert torch.equal(one, ref)


# 12 --------------------------------------------------------------------------

@crit(12)
def test_avsf_and_checkpoint_roundtrips(tmp_path):
    ds = synth_generate(DESK, 3, 5)
    avsf_write(ds, tmp_path / "d.avsf")
    back = avsf_read(tmp_path / "d.avsf")
    assert back.values.tobytes() == ds.values.tobytes() and np.array_equal(back.times, ds.times)
    avsf_write(back, tmp_path / "e.avsf")
    assert (tmp_path / "d.avsf").read_bytes() == (tmp_path / "e.avsf").read_bytes()
    m = Forecaster(ModelConfig(DESK), NormStats.from_dataset(ds), seed=4)
    save_checkpoint(m, tmp_path / "m.avsc")
    save_checkpoint(load_checkpoint(tmp_path / "m.avsc"), tmp_path / "n.avsc")
    assert (tmp_path / "m.avsc").read_bytes() == (tmp_path / "n.avsc").read_bytes()


@crit(12)
def test_manifest_reproduces(tiny_config, tmp_path):
    cfg = ex.config_from_dict(tiny_config)
    a, b = ex.run_train(cfg, tmp_path / "a"), ex.run_train(cfg, tmp_path / "b")
    for run in (a, b):
        ex.run_evaluate(run)
        ex.run_cnop(run)
    assert (a / ex.MANIFEST_NAME).read_bytes() == (b / ex.MANIFEST_NAME).read_bytes()
    assert (a / "cnop" / ex.MANIFEST_NAME).read_bytes() == (b / "cnop" / ex.MANIFEST_NAME).read_bytes()
