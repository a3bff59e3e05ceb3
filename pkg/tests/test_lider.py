import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liderlab.backbone import MLPBackbone, forward_with_trace, init_backbone
from liderlab.errors import ConfigurationError, DimensionError
from liderlab.lider import (
    LiderConfig,
    LipschitzTargets,
    lider_loss,
    loss_0_lip,
    loss_c_lip,
)
from liderlab.spectral import SpectralEstimate, layer_lipschitz_estimates
from liderlab.tensor import Tensor, backward, sgd_step

from conftest import central_diff


def est(values):
    return SpectralEstimate([Tensor(v, requires_grad=True) for v in values])


def targets(values, learnable=True):
    return LipschitzTargets([Tensor(v, requires_grad=learnable) for v in values], True)


class TestTerms:
    def test_c_lip_example(self):
        assert loss_c_lip(est([2.0, 4.0]), targets([1.0, 3.0])).item() == 1.0

    def test_c_lip_zero_at_target(self):
        t = targets([2.0, 4.0])
        loss = loss_c_lip(est([2.0, 4.0]), t)
        g = backward(loss, wrt=t.c)
        assert loss.item() == 0.0 and all(np.all(g[c] == 0) for c in t.c)

    def test_c_lip_length_mismatch(self):
        with pytest.raises(DimensionError):
            loss_c_lip(est([1.0, 2.0]), targets([1.0]))

    def test_0_lip(self):
        assert loss_0_lip(est([2.0, 4.0])).item() == 3.0
        assert loss_0_lip(est([0.0, 0.0])).item() == 0.0
        with pytest.raises(DimensionError):
            loss_0_lip(SpectralEstimate([]))

    def test_combined_example(self):
        e, t = est([2.0, 4.0]), targets([1.0, 3.0])
        total = 0.1 * loss_c_lip(e, t).item() + 0.1 * loss_0_lip(e).item()
        assert total == pytest.approx(0.4)


class TestConfig:
    def test_defaults(self):
        cfg = LiderConfig()
        assert (cfg.alpha, cfg.beta, cfg.power_iters) == (0.1, 0.1, 5)
        assert cfg.target_mode == "learned" and cfg.regularization_target == "buffer"
        assert cfg.fixed_target == 1.0 and cfg.target_lr is None

    @pytest.mark.parametrize("kwargs", [dict(alpha=-1), dict(beta=-0.1), dict(power_iters=0),
                                        dict(target_mode="x"), dict(regularization_target="y"),
                                        dict(target_lr=0.0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            LiderConfig(**kwargs)

    def test_inactive_is_exact_zero(self, rng):
        m = init_backbone([4, 5, 3], 0)
        out = lider_loss(m, rng.standard_normal((6, 4)), LipschitzTargets.for_layers(2),
                         LiderConfig(alpha=0, beta=0), rng)
        assert out.item() == 0.0 and not out.tracked


class TestLiderLoss:
    def test_learned_targets_initialised_to_estimates(self, rng):
        m = init_backbone([4, 6, 3], 1)
        x = rng.standard_normal((8, 4))
        t = LipschitzTargets.for_layers(2)
        lider_loss(m, x, t, LiderConfig(), 0)
        _, trace = forward_with_trace(m, x)
        np.testing.assert_array_equal(t.values(), layer_lipschitz_estimates(trace, 5, 0).values())
        assert t.initialized and len(t.learnable) == 2

    def test_fixed_mode(self, rng):
        m = init_backbone([4, 6, 3], 2)
        x = rng.standard_normal((8, 4))
        cfg = LiderConfig(alpha=0.3, beta=0.2, target_mode="fixed", fixed_target=1.5)
        t = LipschitzTargets.for_layers(2)
        loss = lider_loss(m, x, t, cfg, 0)
        assert t.learnable == [] and np.all(t.values() == 1.5)
        _, trace = forward_with_trace(m, x)
        lam = layer_lipschitz_estimates(trace, 5, 0).values()
        expected = 0.3 / 2 * np.sum(np.abs(lam - 1.5)) + 0.2 / 2 * np.sum(lam)
        assert loss.item() == pytest.approx(expected, rel=1e-12)

    def test_empty_batch_skips(self, rng):
        m = init_backbone([4, 6, 3], 0)
        out = lider_loss(m, np.zeros((0, 4)), LipschitzTargets.for_layers(2), LiderConfig(), rng)
        assert out.item() == 0.0 and not out.tracked
        out = lider_loss(m, None, LipschitzTargets.for_layers(2), LiderConfig(), rng)
        assert out.item() == 0.0

    def test_buffer_mode_ignores_stream(self, rng):
        m = init_backbone([4, 6, 3], 0)
        x = rng.standard_normal((8, 4))

        class Exploding:
            def __len__(self):
                raise AssertionError("stream batch was read")

        a = lider_loss(m, x, LipschitzTargets.for_layers(2), LiderConfig(), 0,
                       stream_x=Exploding())
        b = lider_loss(m, x, LipschitzTargets.for_layers(2), LiderConfig(), 0,
                       stream_x=rng.standard_normal((8, 4)))
        assert a.item() == b.item()

    def test_stream_mode_uses_stream(self, rng):
        m = init_backbone([4, 6, 3], 0)
        xb, xs = rng.standard_normal((8, 4)), rng.standard_normal((8, 4))
        cfg = LiderConfig(regularization_target="stream")
        a = lider_loss(m, xb, LipschitzTargets.for_layers(2), cfg, 0, stream_x=xs)
        b = lider_loss(m, xs, LipschitzTargets.for_layers(2), LiderConfig(), 0)
        assert a.item() == b.item()

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 10.0), st.integers(0, 1000))
    def test_scaling_alpha_beta(self, s, seed):
        r = np.random.default_rng(seed)
        m = init_backbone([4, 6, 3], seed)
        x = r.standard_normal((8, 4))
        c = [1.0, 2.0]

        def run(scale):
            t = targets(c)
            loss = lider_loss(m, x, t, LiderConfig(alpha=0.2 * scale, beta=0.3 * scale), 0)
            g = backward(loss, wrt=list(m.weights) + t.c)
            return loss.item(), [g[p] for p in list(m.weights) + t.c]

        v1, g1 = run(1.0)
        vs, gs = run(s)
        assert vs == pytest.approx(s * v1, rel=1e-12)
        for a, b in zip(g1, gs):
            np.testing.assert_allclose(b, s * a, rtol=1e-10, atol=1e-14)

    def test_targets_converge_on_frozen_backbone(self, rng):
        m = init_backbone([4, 6, 3], 3)
        frozen = MLPBackbone(m.layer_dims, [Tensor(w.data) for w in m.weights])
        x = rng.standard_normal((8, 4))
        cfg = LiderConfig(alpha=0.1, beta=0.0)
        t = LipschitzTargets.for_layers(2)
        for _ in range(200):
            loss = lider_loss(frozen, x, t, cfg, 0)
            if t.learnable:
                g = backward(loss, wrt=t.c)
                t.c = sgd_step(t.c, g, 0.1)
        _, trace = forward_with_trace(frozen, x)
        lam = layer_lipschitz_estimates(trace, 5, 0).values()
        np.testing.assert_allclose(t.values(), lam, atol=1e-3)

    def test_loss_does_not_mutate_targets(self, rng):
        m = init_backbone([4, 6, 3], 0)
        t = targets([1.0, 2.0])
        before = [c for c in t.c]
        lider_loss(m, rng.standard_normal((8, 4)), t, LiderConfig(), 0)
        assert all(a is b for a, b in zip(before, t.c))


def gradient_fidelity_case(seed: int = 0):
    """2-layer, dim-8 net, batch 8, c_k away from the estimates (no |.| kink)."""
    r = np.random.default_rng(seed)
    w1 = r.standard_normal((8, 8)) * 0.5
    w2 = r.standard_normal((8, 8)) * 0.5
    x = r.standard_normal((8, 8)) + 0.5
    return x, [w1, w2], np.array([0.5, 0.7])


def lider_value_and_grads(x, weights, c, cfg):
    m = MLPBackbone([8, 8, 8], [Tensor(w, requires_grad=True) for w in weights])
    t = targets(c)
    loss = lider_loss(m, x, t, cfg, 0)
    g = backward(loss, wrt=list(m.weights) + t.c)
    return loss.item(), [g[w] for w in m.weights], np.array([g[ci].item() for ci in t.c])


def test_gradient_fidelity_smoke():
    x, ws, c = gradient_fidelity_case(1)
    cfg = LiderConfig(power_iters=300)
    _, gw, gc = lider_value_and_grads(x, ws, c, cfg)

    def f_c(cv):
        return lider_value_and_grads(x, ws, cv, cfg)[0]

    np.testing.assert_allclose(gc, central_diff(f_c, c), rtol=1e-3)
    # a learned target above its estimate receives a positive (downward) gradient
    x2, ws2, _ = gradient_fidelity_case(1)
    _, _, gc2 = lider_value_and_grads(x2, ws2, np.array([1e6, 1e6]), cfg)
    assert np.all(gc2 > 0)
