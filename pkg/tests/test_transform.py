"""Transform tests: mode swaps, interval policies, replacement arithmetic."""

import numpy as np
import pytest

from pannkit import nn
from pannkit import polyapprox as pa
from pannkit import transform as tf
from pannkit.fixedpoint import FixedPointFormat, TruncatedReLU
from pannkit.seeding import derive_rng


@pytest.fixture(scope="module")
def backbone():
    return nn.build_mlp((6,), [10, 10], 4, seed=21)


@pytest.fixture(scope="module")
def eval_x():
    return derive_rng(2, "x").normal(size=(100, 6))


@pytest.fixture(scope="module")
def ap(backbone, eval_x):
    b = tf.calibrate_bound(backbone, eval_x)
    return pa.build_appsgn(10, bound=b)


class TestTransform:
    def test_identity_mode_is_bitwise_identity(self, backbone, eval_x):
        same = tf.transform(backbone, nn.ExactReLU())
        np.testing.assert_array_equal(nn.forward(same, eval_x)[0],
                                      nn.forward(backbone, eval_x)[0])

    def test_source_network_untouched(self, backbone, eval_x, ap):
        before = nn.forward(backbone, eval_x)[0]
        tf.transform(backbone, tf.CompositeReLU(ap))
        np.testing.assert_array_equal(nn.forward(backbone, eval_x)[0], before)

    def test_double_transform_rejected(self, backbone, ap):
        pann = tf.transform(backbone, tf.CompositeReLU(ap))
        with pytest.raises(ValueError, match="backbone"):
            tf.transform(pann, tf.InjectedReLU(8))

    def test_restore_backbone_allowed(self, backbone, eval_x, ap):
        pann = tf.transform(backbone, tf.CompositeReLU(ap))
        restored = tf.transform(pann, nn.ExactReLU())
        np.testing.assert_array_equal(nn.forward(restored, eval_x)[0],
                                      nn.forward(backbone, eval_x)[0])

    def test_slot_subset(self, backbone, ap):
        pann = tf.transform(backbone, tf.CompositeReLU(ap), slots=[1])
        modes = [backbone.layers[i].mode for i in backbone.activation_indices()]
        new_modes = [pann.layers[i].mode for i in pann.activation_indices()]
        assert isinstance(new_modes[0], nn.ExactReLU)
        assert isinstance(new_modes[1], tf.CompositeReLU)
        assert isinstance(modes[1], nn.ExactReLU)

    def test_unknown_slot_rejected(self, backbone, ap):
        with pytest.raises(ValueError, match="slots"):
            tf.transform(backbone, tf.CompositeReLU(ap), slots=[5])

    def test_composite_logit_drift_small_and_bounded(self, backbone, eval_x,
                                                     ap):
        """Per-layer propagation of the activation error bound dominates the
        observed logit drift; drift is finite and small."""
        pann = tf.transform(backbone, tf.CompositeReLU(ap))
        base, trace = nn.forward(backbone, eval_x)
        got = nn.forward(pann, eval_x)[0]
        drift = np.max(np.abs(got - base))
        assert np.isfinite(drift)

        # propagated bound: per activation, error <= 2^-beta * B; linear
        # layers scale by the max absolute row sum; smooth slope bounded on
        # the certified interval
        per_act = 2.0 ** -ap.beta * ap.bound
        us = np.linspace(-1, 1, 20001) * ap.bound
        _, ds = ap.eval_with_derivative(us)
        s = np.asarray(ap.eval(us))
        slope = np.max(np.abs((1.0 + s + us * ds) / 2.0))
        bound = 0.0
        for layer in backbone.layers:
            if isinstance(layer, nn.Dense):
                bound = bound * np.abs(layer.W).sum(axis=1).max()
            elif isinstance(layer, nn.Activation):
                bound = bound * slope + per_act
        assert drift <= bound
        assert drift <= 1e-2 * max(1.0, np.max(np.abs(base)))

    def test_drift_shrinks_with_beta(self, backbone, eval_x):
        """Mean |logit drift| non-increasing in beta for nearly all points."""
        b = tf.calibrate_bound(backbone, eval_x)
        base = nn.forward(backbone, eval_x)[0]
        drifts = []
        for beta in (6, 8, 10, 12):
            pann = tf.transform(backbone,
                                tf.CompositeReLU(pa.build_appsgn(beta, bound=b)))
            got = nn.forward(pann, eval_x)[0]
            drifts.append(np.abs(got - base).max(axis=1))
        violations = 0
        comparisons = 0
        for a, bb in zip(drifts, drifts[1:]):
            violations += int(np.sum(bb > a))
            comparisons += len(a)
        assert violations <= 0.05 * comparisons


class TestIntervalPolicy:
    def test_clamp_counts_fraction(self, ap):
        mode = tf.CompositeReLU(ap, tf.IntervalPolicy("clamp_to_B"))
        z = np.array([0.5 * ap.bound, 2.0 * ap.bound, -3.0 * ap.bound])
        mode.apply(z)
        assert mode.clamped == 2 and mode.total == 3
        assert mode.clamp_fraction() == pytest.approx(2 / 3)

    def test_error_policy_aborts(self, ap):
        mode = tf.CompositeReLU(ap, tf.IntervalPolicy("error"))
        with pytest.raises(tf.IntervalOverflowError):
            mode.apply(np.array([2.0 * ap.bound]))

    def test_widen_recertifies(self):
        small = pa.build_appsgn(6, bound=1.0)
        mode = tf.CompositeReLU(small, tf.IntervalPolicy("widen_and_recertify"))
        out = mode.apply(np.array([3.0]))
        assert mode.recertifications == 1
        assert mode.approx.bound == pytest.approx(3.6)
        assert mode.approx.certificate.passed
        assert abs(out[0] - 3.0) <= 2.0 ** -6 * 3.0

    def test_clamped_output_still_close_to_relu(self, ap):
        mode = tf.CompositeReLU(ap, tf.IntervalPolicy("clamp_to_B"))
        z = np.array([1.7 * ap.bound, -1.7 * ap.bound])
        out = mode.apply(z)
        relu = np.maximum(z, 0.0)
        assert np.all(np.abs(out - relu) <= 2.0 ** -ap.beta * np.abs(z))

    def test_unknown_policy_rejected(self):
        with pytest.raises(ValueError):
            tf.IntervalPolicy("hope")


class TestPartialReplace:
    def test_stock_quadratic_coefficients(self):
        p = tf.default_quadratic_replacement()
        assert p.coeffs == (0.28, 0.5, 0.14)
        assert p(0.0) == pytest.approx(0.28)
        assert p(1.0) == pytest.approx(0.92)
        assert p(-1.0) == pytest.approx(-0.08)

    def test_binarized_c1_is_backbone(self, backbone, eval_x):
        mode = tf.PartialReplaceReLU(c=1.0, binarized=True)
        pann = tf.transform(backbone, mode)
        np.testing.assert_array_equal(nn.forward(pann, eval_x)[0],
                                      nn.forward(backbone, eval_x)[0])

    def test_binarized_c0_is_polynomial_net(self, backbone, eval_x):
        mode = tf.PartialReplaceReLU(c=0.0, binarized=True)
        pann = tf.transform(backbone, mode)
        p = tf.default_quadratic_replacement()
        h = eval_x
        for layer in backbone.layers:
            if isinstance(layer, nn.Activation):
                h = p(h)
            else:
                h = layer.forward(h)
        np.testing.assert_array_equal(nn.forward(pann, eval_x)[0], h)

    def test_binarized_requires_binary_c(self):
        with pytest.raises(ValueError):
            tf.PartialReplaceReLU(c=0.5, binarized=True)

    def test_replacement_error_formulas(self):
        """Rounding toward g leaves (1-c)(g-p); toward p leaves c(p-g)."""
        g, p, c = 2.0, 1.5, 0.7
        assert tf.replacement_error(g, p, c, "g") == pytest.approx(0.3 * 0.5)
        assert tf.replacement_error(g, p, c, "p") == pytest.approx(0.7 * -0.5)
        # the two choices bracket zero: their sum is the full gap g-p scaled
        with pytest.raises(ValueError):
            tf.replacement_error(g, p, c, "q")

    def test_mix_interpolates(self):
        z = np.linspace(-2, 2, 9)
        mode = tf.PartialReplaceReLU(c=0.25)
        p = tf.default_quadratic_replacement()
        want = 0.25 * np.maximum(z, 0.0) + 0.75 * p(z)
        np.testing.assert_allclose(mode.apply(z), want, rtol=1e-14)


class TestDescriptors:
    def test_round_trip_composite(self, backbone, eval_x, ap, tmp_path):
        pann = tf.transform(backbone, tf.CompositeReLU(ap))
        path = tmp_path / "desc.json"
        tf.save_pann_descriptor(pann, path)
        rebuilt = tf.apply_descriptor(backbone, tf.load_pann_descriptor(path))
        np.testing.assert_array_equal(nn.forward(rebuilt, eval_x)[0],
                                      nn.forward(pann, eval_x)[0])

    def test_round_trip_injected(self, backbone, eval_x, tmp_path):
        pann = tf.transform(backbone, tf.InjectedReLU(8, "neg_only",
                                                      "worst_case_fixed", 9))
        path = tmp_path / "desc.json"
        tf.save_pann_descriptor(pann, path)
        rebuilt = tf.apply_descriptor(backbone, tf.load_pann_descriptor(path))
        np.testing.assert_array_equal(nn.forward(rebuilt, eval_x)[0],
                                      nn.forward(pann, eval_x)[0])

    def test_round_trip_truncated(self, backbone, eval_x, tmp_path):
        pann = tf.transform(backbone, TruncatedReLU(FixedPointFormat(8)))
        path = tmp_path / "desc.json"
        tf.save_pann_descriptor(pann, path)
        rebuilt = tf.apply_descriptor(backbone, tf.load_pann_descriptor(path))
        np.testing.assert_array_equal(nn.forward(rebuilt, eval_x)[0],
                                      nn.forward(pann, eval_x)[0])


class TestInjectedMode:
    def test_forward_pure(self, backbone, eval_x):
        pann = tf.transform(backbone, tf.InjectedReLU(6, seed=4))
        a = nn.forward(pann, eval_x)[0]
        b = nn.forward(pann, eval_x)[0]
        np.testing.assert_array_equal(a, b)

    def test_slots_get_independent_draws(self):
        m0 = tf.InjectedReLU(6, seed=4).with_slot(0)
        m1 = tf.InjectedReLU(6, seed=4).with_slot(1)
        z = np.ones((2, 50))
        assert not np.array_equal(m0.apply(z), m1.apply(z))

    def test_gradient_matches_fd(self, backbone, eval_x):
        pann = tf.transform(backbone, tf.InjectedReLU(5, seed=1))
        y = np.zeros(eval_x.shape[0], dtype=int)
        gx, _ = nn.input_gradient(pann, eval_x, y)
        h = 1e-6
        # spot-check a handful of coordinates
        rng = np.random.default_rng(0)
        for _ in range(10):
            i = rng.integers(eval_x.shape[0])
            j = rng.integers(eval_x.shape[1])
            xp, xm = eval_x.copy(), eval_x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            lp = nn.loss_and_logit_grad(nn.forward(pann, xp)[0], y,
                                        "cross_entropy")[0]
            lm = nn.loss_and_logit_grad(nn.forward(pann, xm)[0], y,
                                        "cross_entropy")[0]
            fd = (lp - lm) / (2 * h)
            assert gx[i, j] == pytest.approx(fd, rel=2e-3, abs=1e-8)


class TestCompositeGradient:
    def test_gradient_matches_fd(self, backbone, eval_x, ap):
        pann = tf.transform(backbone, tf.CompositeReLU(ap))
        y = np.zeros(eval_x.shape[0], dtype=int)
        gx, _ = nn.input_gradient(pann, eval_x, y)
        h = 1e-6
        rng = np.random.default_rng(3)
        for _ in range(10):
            i = rng.integers(eval_x.shape[0])
            j = rng.integers(eval_x.shape[1])
            xp, xm = eval_x.copy(), eval_x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            lp = nn.loss_and_logit_grad(nn.forward(pann, xp)[0], y,
                                        "cross_entropy")[0]
            lm = nn.loss_and_logit_grad(nn.forward(pann, xm)[0], y,
                                        "cross_entropy")[0]
            fd = (lp - lm) / (2 * h)
            assert gx[i, j] == pytest.approx(fd, rel=2e-3, abs=1e-8)
