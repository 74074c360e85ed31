import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, pair_predicate, pdscl_direct, relative_error
from pdscl.core import BatchMeta
from pdscl.losses import (
    LossOutput,
    build_pair_masks,
    cross_entropy,
    dat_loss,
    l2_normalize,
    pdscl_loss,
    similarity_matrix,
    total_loss_pdscl,
)


def random_meta(rng, n, n_patients=3):
    return BatchMeta(
        rng.integers(0, 2, n),
        [f"p{i}" for i in rng.integers(0, n_patients, n)],
        rng.integers(0, 2, n),
    )


class TestL2Normalize:
    def test_three_four_five(self):
        unit, norms = l2_normalize([[3.0, 4.0]])
        np.testing.assert_allclose(unit, [[0.6, 0.8]])
        assert norms[0] == 5.0

    def test_unit_row_unchanged(self):
        row = np.array([[0.6, 0.0, 0.8]])
        np.testing.assert_allclose(l2_normalize(row)[0], row, rtol=0, atol=1e-15)

    def test_zero_row_names_index(self):
        with pytest.raises(ValueError, match="row 1"):
            l2_normalize([[1.0, 0.0], [0.0, 0.0]])


class TestSimilarity:
    def test_identical_rows(self):
        s = similarity_matrix([[1.0, 0.0], [1.0, 0.0]], 0.5)
        assert s[0, 1] == 2.0

    def test_orthogonal_rows(self):
        assert similarity_matrix([[1.0, 0.0], [0.0, 1.0]], 0.5)[0, 1] == 0.0

    def test_matches_double_loop(self):
        rng = np.random.default_rng(3)
        u, _ = l2_normalize(rng.standard_normal((7, 5)))
        s = similarity_matrix(u, 0.3)
        ref = np.array([[sum(a * b for a, b in zip(u[i], u[j])) / 0.3 for j in range(7)] for i in range(7)])
        np.testing.assert_allclose(s, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.diag(s), 1 / 0.3, atol=1e-12)
        np.testing.assert_array_equal(s, s.T)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            similarity_matrix([[1.0]], 0.0)


class TestPairMasks:
    def test_same_patient_other_domain_is_positive(self):
        m = build_pair_masks(BatchMeta([0, 0], ["A", "A"], [0, 1]))
        assert m.positive[0, 1] and not m.negative[0, 1]

    def test_different_labels_negative(self):
        m = build_pair_masks(BatchMeta([0, 1], ["A", "B"], [0, 0]))
        assert m.negative[0, 1] and not m.positive[0, 1]

    def test_same_everything_in_neither(self):
        m = build_pair_masks(BatchMeta([0, 0], ["A", "A"], [0, 0]))
        assert not m.positive[0, 1] and not m.negative[0, 1]

    @settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_predicate_and_invariants(self, data):
        n = data.draw(st.integers(2, 12))
        labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        patients = data.draw(st.lists(st.sampled_from("ABCD"), min_size=n, max_size=n))
        domains = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        m = build_pair_masks(BatchMeta(labels, patients, domains))
        assert not np.any(m.positive & m.negative)
        assert not np.any(np.diag(m.positive)) and not np.any(np.diag(m.negative))
        for i in range(n):
            for j in range(n):
                assert (m.positive[i, j], m.negative[i, j]) == pair_predicate(labels, patients, domains, i, j)


class TestPdsclLoss:
    def test_two_identical_positives_zero_loss(self):
        f = np.array([[1.0, 0.0], [1.0, 0.0]])
        out = pdscl_loss(f, BatchMeta([0, 0], ["A", "B"], [0, 0]), 0.5)
        assert out.value == pytest.approx(0.0, abs=1e-15)

    def test_no_positives_gives_zero(self):
        rng = np.random.default_rng(0)
        meta = BatchMeta([0, 1, 0], ["A", "B", "A"], [0, 0, 0])
        out = pdscl_loss(rng.standard_normal((3, 4)), meta, 0.5)
        assert out.value == 0.0
        assert not np.any(out.grad)

    def test_random_batch_value_and_gradient(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((6, 4))
        meta = BatchMeta([0, 1, 0, 1, 0, 1], ["A", "A", "B", "B", "C", "C"], [0, 1, 1, 0, 0, 1])
        out = pdscl_loss(f, meta, 0.5)
        ref = pdscl_direct(f.tolist(), meta.labels.tolist(), meta.patient_ids, meta.domain_ids.tolist(), 0.5)
        assert abs(out.value - ref) < 1e-9
        numeric = central_difference(lambda x: pdscl_loss(x, meta, 0.5).value, f)
        assert relative_error(out.grad, numeric).max() < 1e-5

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((8, 3))
        meta = random_meta(rng, 8)
        perm = rng.permutation(8)
        a = pdscl_loss(f, meta, 0.5)
        b = pdscl_loss(f[perm], meta.take(perm), 0.5)
        assert b.value == pytest.approx(a.value, abs=1e-12)
        np.testing.assert_allclose(b.grad, a.grad[perm], atol=1e-12)

    def test_row_scale_invariance(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((8, 3))
        meta = random_meta(rng, 8)
        scaled = f.copy()
        scaled[2] *= 7.5
        a = pdscl_loss(f, meta, 0.5)
        b = pdscl_loss(scaled, meta, 0.5)
        assert abs(a.value - b.value) < 1e-9
        # gradient has no component along the row itself
        assert abs(b.grad[2] @ scaled[2]) < 1e-12

    def test_stable_at_small_temperature(self):
        rng = np.random.default_rng(7)
        f = rng.standard_normal((10, 4)) * 1e3
        meta = random_meta(rng, 10)
        out = pdscl_loss(f, meta, 1e-3)
        assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))

    def test_errors(self):
        with pytest.raises(ValueError):
            pdscl_loss(np.ones((2, 2)), BatchMeta([0, 0], "AB", [0, 0]), 0.0)
        with pytest.raises(ValueError):
            BatchMeta([0], ["A"], [0])

    def test_stacked_input_matches_loop(self):
        rng = np.random.default_rng(8)
        stack = rng.standard_normal((4, 6, 3))
        meta = random_meta(rng, 6)
        out = pdscl_loss(stack, meta, 0.5)
        for k in range(4):
            single = pdscl_loss(stack[k], meta, 0.5)
            assert out.value[k] == pytest.approx(single.value, abs=1e-14)
            np.testing.assert_allclose(out.grad[k], single.grad, atol=1e-14)


class TestCrossEntropy:
    def test_saturated_correct(self):
        assert cross_entropy([[20.0, -20.0]], [0]).value < 1e-15

    def test_uniform(self):
        assert cross_entropy([[0.0, 0.0]], [1]).value == pytest.approx(math.log(2))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((5, 2))
        y = rng.integers(0, 2, 5)
        numeric = central_difference(lambda x: cross_entropy(x, y).value, z)
        assert relative_error(cross_entropy(z, y).grad, numeric).max() < 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy([[0.0, 0.0]], [2])


class TestCompositions:
    def test_total_arithmetic(self):
        g = np.ones((2, 2))
        out = total_loss_pdscl(LossOutput(1.0, g), LossOutput(0.4, 3 * g), 0.5)
        assert out.value == pytest.approx(1.2)
        np.testing.assert_allclose(out.grad, g + 0.5 * 3 * g)

    def test_total_zero_weight(self):
        ce = LossOutput(0.7, np.eye(2))
        out = total_loss_pdscl(ce, LossOutput(5.0, np.ones((2, 2))), 0.0)
        assert out.value == ce.value
        np.testing.assert_array_equal(out.grad, ce.grad)

    def test_dat_zero_weight_is_class_ce(self):
        rng = np.random.default_rng(2)
        zc, zd = rng.standard_normal((2, 4, 2))
        meta = random_meta(rng, 4)
        d = dat_loss(zc, zd, meta, 0.0)
        ce = cross_entropy(zc, meta.labels)
        assert d.value == ce.value
        assert not np.any(d.grad_domain_logits)

    def test_dat_value(self):
        rng = np.random.default_rng(4)
        zc, zd = rng.standard_normal((2, 4, 2))
        meta = random_meta(rng, 4)
        d = dat_loss(zc, zd, meta)
        expect = cross_entropy(zc, meta.labels).value + 0.2 * cross_entropy(zd, meta.domain_ids).value
        assert d.value == pytest.approx(expect, abs=1e-15)
