"""Validator and experiment-driver tests.

The probe oracles are closed forms: the equal-curvature quadratic pair makes
the increment gap 2*eps exactly, the unequal pair makes the ratio 2 - eps
(first-order rate), and the kinked probe has right slope 1 at the origin.
"""

import numpy as np
import pytest

from pannkit import datasets as pd
from pannkit import nn
from pannkit import records as rec
from pannkit import sturdiness as sd
from pannkit import transform as tf
from pannkit import training as tr


class TestProbes:
    def test_quadratic_probe_values(self):
        p = sd.quadratic_probe(1.0)
        assert p.h(3.0) == 4.0
        assert p.d_plus(2.0) == 2.0
        assert p.a == 1.0
        assert p.midpoint_convex()

    def test_negative_anchor_evaluates_at_zero(self):
        p = sd.quadratic_probe(-1.0)
        assert p.a == 0.0

    def test_kinked_probe_one_sided_slopes(self):
        p = sd.abs_plus_quadratic_probe()
        assert p.d_minus(-0.5) == -2.0  # 2*(-0.5) - 1
        assert p.d_plus(-0.5) == 0.0    # 2*(-0.5) + 1
        assert p.d_plus(0.0) == 1.0
        assert p.midpoint_convex()

    def test_midpoint_test_rejects_concave(self):
        bad = sd.ConvexProbe("neg-square", lambda u: -np.asarray(u) ** 2,
                             lambda u: -2 * u, lambda u: -2 * u, zbar=0.0)
        assert not bad.midpoint_convex()


class TestGapLimit:
    def test_equal_curvature_pair_is_exact(self):
        rep = sd.validate_theorem1(sd.quadratic_probe(-1.0),
                                   sd.quadratic_probe(1.0))
        assert rep.limit == 2.0
        assert np.all(rep.residuals < 1e-9)
        assert rep.slope is None  # residuals below the rate floor

    def test_unequal_curvature_first_order_rate(self):
        rep = sd.validate_theorem1(sd.quadratic_probe(-1.0),
                                   sd.quadratic_probe(1.0, scale=2.0))
        # closed form: ratio = 2 - eps
        assert abs(rep.ratio_at(1e-4) - 2.0) <= 1e-3
        assert rep.slope is not None and rep.slope >= 0.9

    def test_kinked_probe_limit_one(self):
        rep = sd.validate_theorem1(sd.abs_plus_quadratic_probe(),
                                   sd.quadratic_probe(1.0, scale=2.0))
        assert rep.limit == 1.0
        assert abs(rep.ratio_at(1e-4) - 1.0) <= 1e-3
        assert rep.slope >= 0.9

    def test_ratio_at_requires_member(self):
        rep = sd.validate_theorem1(sd.quadratic_probe(-1.0),
                                   sd.quadratic_probe(1.0))
        with pytest.raises(ValueError, match="not in the evaluated"):
            rep.ratio_at(0.123)

    def test_rejects_wrong_anchor_signs(self):
        with pytest.raises(ValueError, match="negative minimizer"):
            sd.validate_theorem1(sd.quadratic_probe(1.0),
                                 sd.quadratic_probe(1.0))
        with pytest.raises(ValueError, match="positive minimizer"):
            sd.validate_theorem1(sd.quadratic_probe(-1.0),
                                 sd.quadratic_probe(-1.0))

    def test_rejects_concave_probe(self):
        bad = sd.ConvexProbe("neg-square", lambda u: -np.asarray(u) ** 2,
                             lambda u: -2 * u, lambda u: -2 * u, zbar=-1.0)
        with pytest.raises(ValueError, match="convexity"):
            sd.validate_theorem1(bad, sd.quadratic_probe(1.0))

    def test_rejects_non_stationary_anchor(self):
        shifted = sd.ConvexProbe(
            "off-center", lambda u: (np.asarray(u, float) + 1.0) ** 2,
            lambda u: 2.0 * (u + 1.0), lambda u: 2.0 * (u + 1.0), zbar=-0.5)
        with pytest.raises(ValueError, match="not stationary"):
            sd.validate_theorem1(shifted, sd.quadratic_probe(1.0))

    def test_rejects_nonpositive_eps(self):
        with pytest.raises(ValueError, match="positive"):
            sd.validate_theorem1(sd.quadratic_probe(-1.0),
                                 sd.quadratic_probe(1.0),
                                 epsilons=[0.1, 0.0])


class TestLowerBound:
    def test_default_probes_zero_violations(self):
        for probe in sd.default_lemma_probes():
            rep = sd.validate_lemma_bound(probe)
            assert rep.passed and rep.violations == 0
            assert rep.min_margin >= 0.0
            assert len(rep.epsilons) == 50

    def test_stationary_point_example(self):
        rep = sd.validate_lemma_bound(sd.quadratic_probe(1.0),
                                      epsilons=[0.1])
        assert rep.lhs[0] == 0.0
        assert rep.rhs[0] == pytest.approx(0.01)

    def test_slope_two_example(self):
        rep = sd.validate_lemma_bound(sd.quadratic_probe(-1.0),
                                      epsilons=[0.1])
        # a = 0, h'(0) = 2: lhs 0.2, rhs 0.21
        assert rep.lhs[0] == pytest.approx(0.2)
        assert rep.rhs[0] == pytest.approx(0.21)

    def test_exp_example(self):
        rep = sd.validate_lemma_bound(sd.exp_probe(), epsilons=[0.5])
        assert rep.lhs[0] == pytest.approx(0.5)
        assert rep.rhs[0] == pytest.approx(np.exp(0.5) - 1.0)


@pytest.fixture(scope="module")
def blobs():
    return pd.load_dataset(pd.DatasetSpec(
        source="synthetic_blobs", n=400, classes=2, dim=2, seed=3))


@pytest.fixture(scope="module")
def trained(blobs):
    net = nn.build_mlp((2,), (12,), 2, seed=0)
    sgd = nn.SgdState(lr=0.05, momentum=0.9, weight_decay=1e-3)
    return tr.train(net, blobs, sgd, epochs=12, seed=1).net


class TestPerturbationExperiment:
    def test_row_layout(self, trained, blobs):
        rows = sd.perturbation_loss_experiment(
            trained, blobs.x_test, blobs.y_test, betas=(8,), seeds=(0, 1))
        assert len(rows) == 2 * 3  # 2 filters x (2 seeds + mean)
        means = [r for r in rows if r["seed"] == "mean"]
        assert {m["sign_filter"] for m in means} == {"neg_only", "pos_only"}

    def test_huge_beta_vanishes(self, trained, blobs):
        rows = sd.perturbation_loss_experiment(
            trained, blobs.x_test, blobs.y_test, betas=(52,), seeds=(0,))
        assert all(abs(r["delta_loss"]) < 1e-9 for r in rows)

    def test_neg_only_is_noop_on_positive_preactivations(self, blobs):
        # bias +30 makes every pre-activation positive on this input range
        net = nn.Network(
            (nn.Dense(W=np.eye(2), b=np.array([30.0, 30.0])),
             nn.Activation(nn.ExactReLU()),
             nn.Dense(W=np.array([[1.0, -1.0], [-0.5, 2.0]]),
                      b=np.zeros(2))),
            input_shape=(2,), n_classes=2)
        rows = sd.perturbation_loss_experiment(
            net, blobs.x_test, blobs.y_test, betas=(6,),
            sign_filters=("neg_only",), seeds=(0,))
        assert all(r["delta_loss"] == 0.0 for r in rows)


class TestPlateau:
    def test_flat_tail_detected(self):
        losses = [1.0, 0.9, 0.8, 0.7, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6]
        assert sd.detect_plateau(losses) == 10

    def test_steady_decrease_never_plateaus(self):
        losses = [1.0 * 0.8 ** k for k in range(20)]
        assert sd.detect_plateau(losses) is None

    def test_immediate_plateau(self):
        assert sd.detect_plateau([0.5] * 8) == 6

    def test_short_curve(self):
        assert sd.detect_plateau([1.0, 0.9]) is None


class TestSweep:
    def _spec(self, **kw):
        base = dict(wds=(0.0, 1e-2), seeds=(0,), betas=(6,), t_primes=(0, 2),
                    epochs=6, lr=0.05, batch_size=64)
        base.update(kw)
        return sd.SweepSpec(**base)

    def test_grid_validation(self):
        with pytest.raises(ValueError, match="wds"):
            sd.SweepSpec(wds=(), seeds=(0,), betas=(6,))
        with pytest.raises(ValueError, match="method"):
            self._spec(method="distill")

    def test_rows_and_trend(self, blobs, tmp_path):
        store = rec.RecordStore(tmp_path / "sweep.csv",
                                columns=rec.SWEEP_COLUMNS)
        res = sd.weight_decay_sweep(self._spec(), "mlp:8", blobs, store=store)
        metrics = [r["metric"] for r in res.rows]
        # per cell: plateau_epoch + 2 t' x (backbone + pann + delta)
        assert metrics.count("plateau_epoch") == 2
        assert metrics.count("backbone_accuracy") == 4
        assert metrics.count("pann_accuracy") == 4
        assert res.n_written == len(res.rows)
        assert set(res.trend[6]) == {0.0, 1e-2}
        for acc in res.trend[6].values():
            assert 0.0 <= acc <= 1.0

    def test_store_resume_skips_recompute(self, blobs, tmp_path):
        store = rec.RecordStore(tmp_path / "sweep.csv",
                                columns=rec.SWEEP_COLUMNS)
        spec = self._spec(wds=(0.0,), t_primes=(0,))
        first = sd.weight_decay_sweep(spec, "mlp:8", blobs, store=store)
        assert first.n_written > 0
        again = sd.weight_decay_sweep(spec, "mlp:8", blobs, store=store)
        assert again.n_written == 0
        got = {(r["metric"], round(float(r["value"]), 12))
               for r in again.rows}
        want = {(r["metric"], round(float(r["value"]), 12))
                for r in first.rows}
        assert got == want

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverging_cell_recorded_not_fatal(self, blobs, tmp_path):
        store = rec.RecordStore(tmp_path / "sweep.csv",
                                columns=rec.SWEEP_COLUMNS)
        spec = self._spec(wds=(0.0,), t_primes=(0,), lr=1e9)
        res = sd.weight_decay_sweep(spec, "mlp:8", blobs, store=store)
        assert [r["metric"] for r in res.rows] == ["failed"]
        assert res.rows[0]["value"] >= 1

    def test_backbone_rows_match_standalone_evaluation(self, blobs, tmp_path):
        spec = self._spec(wds=(0.0,), t_primes=(0,), epochs=4)
        res = sd.weight_decay_sweep(spec, "mlp:8", blobs)
        bb = [r for r in res.rows if r["metric"] == "backbone_accuracy"][0]
        plateau = [r for r in res.rows if r["metric"] == "plateau_epoch"][0]
        net0 = nn.build_arch("mlp:8", blobs.sample_shape, blobs.n_classes, 0)
        sgd = nn.SgdState(lr=0.05, momentum=0.9, weight_decay=0.0)
        redo = tr.train(net0, blobs, sgd, epochs=min(int(plateau["value"]), 4),
                        batch_size=64, seed=0)
        _, acc = tr.evaluate(redo.net, blobs.x_test, blobs.y_test)
        assert bb["value"] == acc
