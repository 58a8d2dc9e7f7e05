import math

import numpy as np
import pytest
import torch

from nimbus.errors import TrainingDivergenceError, ValidationError
from nimbus.gridio import GridSpec, synth_generate
from nimbus.model import Forecaster, ModelConfig, load_checkpoint
from nimbus.trainer import (
    OptimState,
    TrainConfig,
    _Batches,
    adamw_step,
    cosine_lr,
    read_history,
    smoothed,
    train,
    write_history,
)

TINY = GridSpec.regular(8, 16, (850, 500), poles=False)


def tiny_model_config(variant="full"):
    return ModelConfig(TINY, embed_dim=16, n_blocks=2, window=4, heads=2, variant=variant)


def adam_oracle(theta, grads, lr, b1, b2, eps):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


class TestAdamW:
    def test_matches_textbook_adam(self):
        rng = np.random.default_rng(0)
        theta0 = rng.normal(size=5)
        grads = rng.normal(size=(100, 5))
        p = {"w": torch.as_tensor(theta0.copy())}
        st = OptimState.zeros_like(p)
        for g in grads:
            adamw_step(p, {"w": torch.as_tensor(g)}, st, 1e-2, 0.9, 0.95, 0.0)
        ref = [adam_oracle(theta0[i], grads[:, i], 1e-2, 0.9, 0.95, 1e-8) for i in range(5)]
        assert np.abs(p["w"].numpy() - ref).max() < 1e-12
        assert st.step == 100

    def test_first_step_magnitude_is_lr(self):
        p = {"w": torch.tensor([2.0], dtype=torch.float64)}
        adamw_step(p, {"w": torch.tensor([-3.7])}, OptimState.zeros_like(p), 1e-3)
        assert abs(float(p["w"]) - 2.0 - 1e-3) < 1e-10

    def test_zero_grad_no_decay_is_noop(self):
        p = {"w": torch.tensor([1.5, -2.0], dtype=torch.float64)}
        adamw_step(p, {"w": torch.zeros(2)}, OptimState.zeros_like(p), 0.1)
        assert p["w"].tolist() == [1.5, -2.0]

    def test_pure_decay(self):
        p = {"w": torch.tensor([1.0], dtype=torch.float64)}
        adamw_step(p, {"w": torch.zeros(1)}, OptimState.zeros_like(p), 0.01, weight_decay=0.1)
        assert abs(float(p["w"]) - 0.999) < 1e-15

    def test_non_finite_gradient_names_parameter(self):
        p = {"a": torch.zeros(1, dtype=torch.float64), "b": torch.zeros(1, dtype=torch.float64)}
        with pytest.raises(TrainingDivergenceError) as err:
            adamw_step(p, {"a": torch.zeros(1), "b": torch.tensor([float("nan")])}, OptimState.zeros_like(p), 0.1)
        assert err.value.parameter == "b"
        assert float(p["a"]) == 0.0


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 500, 2.5e-4) == 2.5e-4
        assert abs(cosine_lr(500, 500, 2.5e-4)) < 1e-20
        assert abs(cosine_lr(250, 500, 2.5e-4, 1e-5) - (2.5e-4 + 1e-5) / 2) < 1e-18

    def test_monotone(self):
        lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            cosine_lr(11, 10, 1.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"beta1": 1.0}, {"beta2": -0.1}, {"lr_min": 1.0}, {"batch": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            TrainConfig(**kw)

    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.lr0, tc.beta1, tc.beta2, tc.weight_decay) == (2.5e-4, 0.9, 0.95, 0.1)


class TestSampling:
    def test_pure_in_seed_and_iteration(self):
        ds = synth_generate(TINY, 0, 12)
        from nimbus.gridio import NormStats

        b = _Batches(ds, NormStats.from_dataset(ds), 1e-8)
        x1 = b.sample(3, 7, 4)
        x2 = b.sample(3, 7, 4)
        assert all(torch.equal(p, q) for p, q in zip(x1, x2))
        assert not torch.equal(b.sample(3, 8, 4)[0], x1[0])

    def test_triples_are_consecutive(self):
        ds = synth_generate(TINY, 0, 12)
        from nimbus.gridio import NormStats

        stats = NormStats.from_dataset(ds)
        b = _Batches(ds, stats, 1e-8)
        prev, cur, nxt, _ = b.sample(0, 0, 3)
        for i in range(3):
            k = int(np.argmin([float((prev[i] - b.x[j]).abs().max()) for j in range(b.n)]))
            assert torch.equal(cur[i], b.x[k + 1]) and torch.equal(nxt[i], b.x[k + 2])


class TestTrain:
    def test_zero_iterations_returns_init(self):
        ds = synth_generate(TINY, 0, 10)
        m, hist = train(ds, tiny_model_config(), TrainConfig(iterations=0, seed=4))
        ref = Forecaster(tiny_model_config(), m.stats(), seed=4)
        assert hist == []
        assert all(torch.equal(a, b) for a, b in zip(m.state_dict().values(), ref.state_dict().values()))

    def test_deterministic_and_finite(self):
        ds = synth_generate(TINY, 1, 12)
        cfg = TrainConfig(iterations=6, batch=2, seed=2)
        _, h1 = train(ds, tiny_model_config(), cfg)
        _, h2 = train(ds, tiny_model_config(), cfg)
        assert h1 == h2
        assert all(math.isfinite(r["total"]) for r in h1)
        assert all(r["total"] == r["forecast_loss"] + r["guide_loss"] for r in h1)

    def test_loss_decreases(self):
        ds = synth_generate(TINY, 1, 20)
        _, hist = train(ds, tiny_model_config("no_mp_ic"), TrainConfig(iterations=60, batch=2, lr0=2e-3))
        assert hist[-1]["total"] < hist[0]["total"]
        assert all(r["guide_loss"] == 0.0 for r in hist)

    def test_checkpoints_and_history_csv(self, tmp_path):
        ds = synth_generate(TINY, 1, 10)
        m, hist = train(ds, tiny_model_config(), TrainConfig(iterations=4, batch=2, checkpoint_every=2), tmp_path)
        ckpts = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.avsc"))
        assert ckpts == ["ckpt_000002.avsc", "ckpt_000004.avsc"]
        last = load_checkpoint(tmp_path / "checkpoints" / "ckpt_000004.avsc")
        assert all(torch.equal(a, b) for a, b in zip(m.state_dict().values(), last.state_dict().values()))
        write_history(hist, tmp_path / "h.csv")
        assert read_history(tmp_path / "h.csv") == hist

    def test_too_short(self):
        with pytest.raises(ValidationError):
            train(synth_generate(TINY, 0, 3), tiny_model_config(), TrainConfig(iterations=1))

    def test_grid_mismatch(self):
        with pytest.raises(ValidationError):
            train(synth_generate(TINY, 0, 10), ModelConfig(GridSpec.desk()), TrainConfig(iterations=1))


def test_smoothed_trailing_mean():
    s = smoothed([4.0, 2.0, 0.0, 6.0], window=2)
    assert s.tolist() == [4.0, 3.0, 1.0, 3.0]
