import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqcascade.scoretab import ScoreTable
from uqcascade.uncertainty import (
    CombineRule,
    ScoreKind,
    ScoreMethod,
    energy,
    neg_msp,
    prefix_evaluate,
    softmax,
)

MSP_PRED = ScoreMethod(ScoreKind.NEG_MSP, CombineRule.PREDICTIVE)
MSP_MEMBER = ScoreMethod(ScoreKind.NEG_MSP, CombineRule.MEMBER_MEAN)
ENERGY_MEMBER = ScoreMethod(ScoreKind.ENERGY, CombineRule.MEMBER_MEAN)


def table_from_logits(stage_logits, labels=None):
    logits = np.asarray(stage_logits, dtype=np.float32)
    m, n, k = logits.shape
    if labels is None:
        labels = np.zeros(n, dtype=np.int32)
    return ScoreTable(logits, labels, np.zeros(n, np.uint8), np.ones(m))


class TestSoftmax:
    def test_symmetric(self):
        assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]

    def test_closed_form_quarter(self):
        # oracle: direct exp/sum at full precision
        v = [math.log(1.0), math.log(3.0)]
        want = np.exp(v) / np.sum(np.exp(v))
        got = softmax(v)
        assert np.allclose(got, [0.25, 0.75], atol=1e-12)
        assert np.allclose(got, want, atol=1e-15)

    def test_large_values_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.isfinite(p).all()
        assert p[0] == 1.0 and p[1] == 0.0  # exp(-1000) underflows cleanly

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        p = softmax(rng.normal(scale=20, size=(100, 7)))
        assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)
        assert np.all(p >= 0)


class TestScores:
    def test_neg_msp_uniform(self):
        assert neg_msp(np.full(10, 0.1)) == pytest.approx(-0.1, abs=1e-15)

    def test_neg_msp_direct(self):
        assert neg_msp([0.7, 0.2, 0.1]) == -0.7

    def test_neg_msp_one_hot(self):
        assert neg_msp([0.0, 1.0, 0.0]) == -1.0

    def test_energy_zeros(self):
        assert energy(np.zeros(4)) == pytest.approx(-math.log(4.0), abs=1e-15)

    def test_energy_large_no_overflow(self):
        assert energy([1000.0, 1000.0]) == pytest.approx(-(1000.0 + math.log(2.0)), abs=1e-9)

    def test_energy_direct_summation_oracle(self):
        want = -math.log(sum(math.exp(v) for v in [0.0, 1.0, 2.0]))
        assert energy([0.0, 1.0, 2.0]) == pytest.approx(want, abs=1e-12)
        assert energy([0.0, 1.0, 2.0]) == pytest.approx(-2.4076, abs=5e-5)


class TestMethod:
    def test_energy_predictive_rejected(self):
        with pytest.raises(ValueError, match="predictive distribution"):
            ScoreMethod(ScoreKind.ENERGY, CombineRule.PREDICTIVE)


class TestPrefixEvaluate:
    def test_prefix_one_is_single_model(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(2, 5, 4)).astype(np.float32)
        t = table_from_logits(logits)
        for method in (MSP_PRED, MSP_MEMBER, ENERGY_MEMBER):
            out = prefix_evaluate(t, method, 1)
            probs = softmax(logits[0].astype(np.float64))
            assert np.array_equal(out.prediction, np.argmax(probs, axis=-1))
            if method.kind is ScoreKind.NEG_MSP:
                assert np.array_equal(out.uncertainty, -probs.max(axis=-1))

    def test_identical_stages_idempotent(self):
        rng = np.random.default_rng(4)
        one = rng.normal(size=(1, 6, 3)).astype(np.float32)
        two = np.repeat(one, 2, axis=0)
        t1, t2 = table_from_logits(one), table_from_logits(two)
        for method in (MSP_PRED, MSP_MEMBER, ENERGY_MEMBER):
            a = prefix_evaluate(t1, method, 1)
            b = prefix_evaluate(t2, method, 2)
            assert np.array_equal(a.uncertainty, b.uncertainty)
            assert np.array_equal(a.prediction, b.prediction)

    def test_combine_rules_distinguished(self):
        # logits stored as float32, so hand values hold to ~1e-7
        # stages [0,0] and [0,ln3]: both rules agree at -0.625
        t = table_from_logits([[[0.0, 0.0]], [[0.0, math.log(3.0)]]])
        u_pred = prefix_evaluate(t, MSP_PRED, 2).uncertainty[0]
        u_member = prefix_evaluate(t, MSP_MEMBER, 2).uncertainty[0]
        assert u_pred == pytest.approx(-0.625, abs=1e-6)
        assert u_member == pytest.approx(-0.625, abs=1e-6)
        # stages [ln3,0] and [0,ln3]: predictive -0.5, member-mean -0.75
        t = table_from_logits([[[math.log(3.0), 0.0]], [[0.0, math.log(3.0)]]])
        u_pred = prefix_evaluate(t, MSP_PRED, 2).uncertainty[0]
        u_member = prefix_evaluate(t, MSP_MEMBER, 2).uncertainty[0]
        assert u_pred == pytest.approx(-0.5, abs=1e-6)
        assert u_member == pytest.approx(-0.75, abs=1e-6)

    def test_prefix_distribution_valid(self):
        rng = np.random.default_rng(5)
        t = table_from_logits(rng.normal(scale=10, size=(3, 50, 6)).astype(np.float32))
        for l in (1, 2, 3):
            probs = softmax(t.logits[:l].astype(np.float64)).mean(axis=0)
            assert np.all(np.abs(probs.sum(axis=-1) - 1.0) <= 1e-12)

    def test_prefix_out_of_range(self):
        t = table_from_logits(np.zeros((2, 3, 2), np.float32))
        with pytest.raises(ValueError):
            prefix_evaluate(t, MSP_PRED, 3)
        with pytest.raises(ValueError):
            prefix_evaluate(t, MSP_PRED, 0)

    def test_stage_copies_equal_single_model(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(1, 8, 5)).astype(np.float32)
        for m in (2, 4):
            t = table_from_logits(np.repeat(base, m, axis=0))
            single = prefix_evaluate(table_from_logits(base), MSP_PRED, 1)
            full = prefix_evaluate(t, MSP_PRED, m)
            assert np.array_equal(single.uncertainty, full.uncertainty)
            assert np.array_equal(single.prediction, full.prediction)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        shift=st.floats(-50, 50),
    )
    def test_constant_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=5, size=(2, 4, 5))
        shifted = logits + shift
        assert np.allclose(softmax(logits), softmax(shifted), atol=1e-12)
        assert np.allclose(
            neg_msp(softmax(logits)), neg_msp(softmax(shifted)), atol=1e-12
        )
        assert np.allclose(energy(shifted), energy(logits) - shift, atol=1e-9)
        t_a = table_from_logits(logits.astype(np.float32))
        t_b = table_from_logits(shifted.astype(np.float32))
        for method in (MSP_PRED, MSP_MEMBER):
            a = prefix_evaluate(t_a, method, 2)
            b = prefix_evaluate(t_b, method, 2)
            assert np.array_equal(a.prediction, b.prediction)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_class_permutation(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(2, 6, 4)).astype(np.float32)
        perm = rng.permutation(4)
        t = table_from_logits(logits)
        tp = table_from_logits(logits[:, :, perm])
        for method in (MSP_PRED, MSP_MEMBER, ENERGY_MEMBER):
            a = prefix_evaluate(t, method, 2)
            b = prefix_evaluate(tp, method, 2)
            # softmax normalization sums in permuted order: equal to the ulp
            assert np.allclose(a.uncertainty, b.uncertainty, rtol=0, atol=1e-12)
            # perm maps old class index -> position; prediction must map back
            assert np.array_equal(perm[b.prediction], a.prediction)
