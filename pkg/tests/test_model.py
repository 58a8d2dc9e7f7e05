import numpy as np
import pytest
import torch

from nimbus import autodiff as ad
from nimbus.errors import CorruptionError, FormatError, LayoutError, RolloutDivergenceError, ValidationError
from nimbus.gridio import GridSpec, NormStats, normalize, synth_generate
from nimbus.model import (
    GROUPS,
    VARIANTS,
    Forecaster,
    ModelConfig,
    WindowBlock,
    forward,
    load_checkpoint,
    read_arrays,
    rollout,
    save_checkpoint,
    write_arrays,
)
from nimbus.objective import focal_loss, mask_labels

SPEC = GridSpec.desk()


@pytest.fixture(scope="module")
def data():
    ds = synth_generate(SPEC, 0, 6)
    stats = NormStats.from_dataset(ds)
    x = torch.as_tensor(np.stack([normalize(ds[i], stats).values for i in range(len(ds))]))
    return ds, stats, x


def model(variant="full", stats=None, seed=0, **kw):
    return Forecaster(ModelConfig(SPEC, variant=variant, **kw), stats, seed=seed)


class TestConfig:
    def test_unknown_variant(self):
        with pytest.raises(ValidationError):
            ModelConfig(SPEC, variant="tiny")

    def test_latent_shape(self):
        assert ModelConfig(GridSpec.full(), patch=4).latent_hw == (46, 90)
        assert ModelConfig(SPEC).latent_hw == (16, 32)

    def test_hybrid_channels(self):
        assert ModelConfig(SPEC, variant="full").hybrid_channels == 10
        assert ModelConfig(SPEC, variant="no_ic").hybrid_channels == 8

    def test_missing_variables(self):
        with pytest.raises(LayoutError):
            ModelConfig(GridSpec([0.0], [0.0, 1.0], [500], ["t", "q"]))


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_desk_shapes(self, data, variant):
        _, stats, x = data
        out = forward(model(variant, stats), x[0], x[1])
        assert out.forecast.shape == SPEC.shape
        if variant in ("full", "no_ic"):
            assert out.mask_logits.shape == (8, 32, 64)
            assert torch.isfinite(out.mask_logits).all()
        else:
            assert out.mask_logits is None

    def test_layout_mismatch(self, data):
        _, stats, x = data
        with pytest.raises(LayoutError):
            model("full", stats)(x[0], x[1][:, :16])

    def test_guide_branch_starts_as_noop(self, data):
        _, stats, x = data
        a = model("full", stats)(x[:2], x[1:3]).forecast
        b = model("no_mp_ic", stats)(x[:2], x[1:3]).forecast
        assert torch.equal(a, b)

    def test_batch_permutation(self, data):
        _, stats, x = data
        m = model("full", stats)
        perm = torch.tensor([2, 0, 3, 1])
        a = m(x[:4], x[1:5])
        b = m(x[:4][perm], x[1:5][perm])
        assert torch.allclose(a.forecast[perm], b.forecast, rtol=0, atol=1e-12)
        assert torch.allclose(a.mask_logits[perm], b.mask_logits, rtol=0, atol=1e-12)


class TestGroups:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_partition_total_and_disjoint(self, variant):
        m = model(variant)
        groups = m.parameter_groups()
        assert set(groups) == set(GROUPS)
        owned = [id(p) for g in groups.values() for p in g.values()]
        assert len(owned) == len(set(owned))
        assert set(owned) == {id(p) for p in m.parameters()}

    def test_variant_topology(self):
        assert not model("no_mp_ic").parameter_groups()["guide_head"]
        assert "decoder" not in model("baseline").cloud_path


class TestDetach:
    @pytest.mark.parametrize("variant", ["full", "no_ic"])
    def test_guide_loss_never_reaches_backbone(self, data, variant):
        ds, stats, x = data
        m = model(variant, stats)
        out = m(x[:2], x[1:3])
        labels = torch.as_tensor(np.stack([mask_labels(ds[i]).bits for i in (2, 3)]).astype(np.float64))
        g = ad.backward(focal_loss(out.mask_logits, labels), m.parameter_groups()["backbone"])
        assert all(np.count_nonzero(v) == 0 for v in g.values())
        g_head = ad.backward(focal_loss(m(x[:2], x[1:3]).mask_logits, labels), m.parameter_groups()["guide_head"])
        assert any(np.count_nonzero(v) > 0 for v in g_head.values())

    def test_undetached_path_reaches_inputs(self, data):
        _, stats, x = data
        m = model("full", stats)
        xc = x[1].clone().requires_grad_(True)
        out = m(x[0], xc, detach_features=False)
        (g,) = torch.autograd.grad(out.mask_logits.sum(), xc)
        assert torch.count_nonzero(g) > 0


class TestMaskPredict:
    def test_zero_params_give_bias(self, data):
        _, stats, x = data
        m = model("full", stats)
        with torch.no_grad():
            for p in m.guide_head.parameters():
                p.zero_()
            bias = m.guide_head["predictor"].decoder.bias
            bias.copy_(torch.arange(8, dtype=ad.DTYPE) - 3.5)
        out = m(x[0], x[1])
        expected = bias.detach()[:, None, None].expand(8, 32, 64)
        assert torch.equal(out.mask_logits, expected)

    def test_variant_without_head(self):
        m = model("no_mp_ic")
        with pytest.raises(ValidationError):
            m.mask_predict(torch.zeros(1, 16, 32, 320), torch.zeros(1, 8, 32, 64))


class TestAttention:
    def test_single_window_equals_global(self):
        rng = np.random.default_rng(0)
        dim, heads, n = 8, 2, 4
        blk = WindowBlock(dim, heads, n, 0, 2.0, torch.Generator().manual_seed(1))
        with torch.no_grad():
            blk.rel_bias.copy_(torch.as_tensor(rng.normal(size=blk.rel_bias.shape)))
        x = torch.as_tensor(rng.normal(size=(1, n, n, dim)))
        got = blk.attend(x).detach().numpy().reshape(n * n, dim)

        t = x.numpy().reshape(n * n, dim)
        w = {k: v.detach().numpy() for k, v in blk.named_parameters()}
        qkv = t @ w["qkv_weight"].T + w["qkv_bias"]
        bias = blk.position_bias().detach().numpy()
        dh = dim // heads
        heads_out = []
        for h in range(heads):
            q = qkv[:, h * dh:(h + 1) * dh]
            k = qkv[:, dim + h * dh:dim + (h + 1) * dh]
            v = qkv[:, 2 * dim + h * dh:2 * dim + (h + 1) * dh]
            s = q @ k.T / np.sqrt(dh) + bias[h]
            p = np.exp(s - s.max(axis=1, keepdims=True))
            heads_out.append((p / p.sum(axis=1, keepdims=True)) @ v)
        ref = np.concatenate(heads_out, axis=1) @ w["proj_weight"].T + w["proj_bias"]
        assert np.abs(got - ref).max() < 1e-10

    def test_shifted_block_is_finite_and_shaped(self):
        blk = WindowBlock(8, 2, 4, 2, 2.0, torch.Generator().manual_seed(0))
        y = blk(torch.randn(2, 8, 12, 8, dtype=ad.DTYPE))
        assert y.shape == (2, 8, 12, 8) and torch.isfinite(y).all()


class TestRollout:
    def test_single_step_equals_forward(self, data):
        _, stats, x = data
        m = model("full", stats)
        with torch.no_grad():
            (one,) = rollout(m, x[0], x[1], 1)
            assert torch.equal(one, forward(m, x[0], x[1]).forecast)

    def test_length_and_deterministic(self, data):
        _, stats, x = data
        m = model("no_ic", stats)
        with torch.no_grad():
            a = rollout(m, x[0], x[1], 3)
            b = rollout(m, x[0], x[1], 3)
        assert len(a) == 3
        assert all(torch.equal(p, q) for p, q in zip(a, b))

    def test_second_step_uses_forecast(self, data):
        _, stats, x = data
        m = model("no_mp_ic", stats)
        with torch.no_grad():
            seq = rollout(m, x[0], x[1], 2)
            assert torch.equal(seq[1], m(x[1], seq[0]).forecast)

    def test_zero_steps(self, data):
        _, stats, x = data
        with pytest.raises(ValidationError):
            rollout(model("baseline", stats), x[0], x[1], 0)

    def test_divergence_reports_step(self, data):
        _, stats, x = data
        m = model("baseline", stats)
        with torch.no_grad():
            m.backbone["decoder"].bias.fill_(float("inf"))
        with pytest.raises(RolloutDivergenceError) as err:
            rollout(m, x[0], x[1], 2)
        assert err.value.step == 1


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_roundtrip_bit_exact(self, tmp_path, data, variant):
        _, stats, x = data
        m = model(variant, stats, seed=3)
        save_checkpoint(m, tmp_path / "m.avsc")
        back = load_checkpoint(tmp_path / "m.avsc")
        assert back.config == m.config
        for (k, a), (k2, b) in zip(m.state_dict().items(), back.state_dict().items()):
            assert k == k2 and torch.equal(a, b)
        with torch.no_grad():
            assert torch.equal(m(x[0], x[1]).forecast, back(x[0], x[1]).forecast)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.avsc"
        write_arrays({"a": np.ones(3)}, p)
        p.write_bytes(b"NOPE" + p.read_bytes()[4:])
        with pytest.raises(FormatError):
            read_arrays(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "a.avsc"
        write_arrays({"a": np.ones((4, 5))}, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(CorruptionError):
            read_arrays(p)

    def test_seed_changes_init(self):
        a, b = model(seed=0), model(seed=1)
        assert not torch.equal(a.backbone["encoder"].weight, b.backbone["encoder"].weight)
