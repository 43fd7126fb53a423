import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diverse_vse import RunConfig
from diverse_vse import tensor as T
from diverse_vse.objectives import (EncodedBatch, cosine, diversity_pair, diversity_total,
                                    ranking_loss, total_loss, triplet_hn)
from diverse_vse.errors import ContractError
from diverse_vse.tensor import Tape, Tensor, backward

from conftest import make_encoded, numeric_grad, rel_err


def brute_cos(x, y):
    nx, ny = math.sqrt(sum(v * v for v in x)), math.sqrt(sum(v * v for v in y))
    return 0.0 if nx == 0 or ny == 0 else sum(a * b for a, b in zip(x, y)) / (nx * ny)


def brute_triplet(a, b, margin):
    """Every negative enumerated, max taken, both directions summed."""
    n = len(a)
    total = 0.0
    for p in range(n):
        pos = brute_cos(a[p], b[p])
        worst_b = max(brute_cos(a[p], b[q]) for q in range(n) if q != p)
        worst_a = max(brute_cos(a[q], b[p]) for q in range(n) if q != p)
        total += max(0.0, margin - pos + worst_b) + max(0.0, margin - pos + worst_a)
    return total


class TestCosine:
    def test_self(self):
        assert abs(cosine([3.0, -1.0, 2.0], [3.0, -1.0, 2.0]).value - 1.0) <= 1e-15

    def test_orthogonal(self):
        assert cosine([1.0, 0.0], [0.0, 2.0]).value == 0.0

    def test_forty_five_degrees(self):
        assert abs(cosine([1.0, 0.0], [1.0, 1.0]).value - 0.7071067811865475) <= 1e-15

    def test_zero_vector(self):
        a = Tensor([0.0, 0.0], requires_grad=True)
        with Tape() as tape:
            c = cosine(a, [1.0, 2.0])
        backward(c, tape)
        assert c.value == 0.0 and not a.grad.any()

    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)),
           arrays(np.float64, 6, elements=st.floats(-10, 10)),
           st.floats(1e-3, 1e3))
    @settings(max_examples=200, deadline=None)
    def test_bounded_and_scale_invariant(self, a, b, c):
        s = float(cosine(a, b).value)
        assert -1 - 1e-12 <= s <= 1 + 1e-12
        if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
            assert abs(float(cosine(c * a, b).value) - s) <= 1e-12


class TestTriplet:
    def test_margin_satisfied(self):
        a = [[1.0, 0.0], [0.0, 1.0]]
        assert triplet_hn(a, a, 0.2).value == 0.0

    def test_all_identical(self):
        v = [[0.3, -0.4, 1.2]] * 5
        assert abs(triplet_hn(v, v, 0.2).value - 2 * 5 * 0.2) <= 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        assert abs(triplet_hn(a, b, 0.2).value - brute_triplet(a.tolist(), b.tolist(), 0.2)) <= 1e-12

    def test_batch_of_one(self):
        with pytest.raises(ContractError):
            triplet_hn([[1.0, 2.0]], [[1.0, 2.0]], 0.2)

    def test_bad_margin(self):
        with pytest.raises(ContractError):
            triplet_hn(np.eye(2), np.eye(2), 0.0)

    @given(st.integers(2, 8), st.integers(1, 16), st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative_and_zero_iff_separated(self, n, d, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        loss = float(triplet_hn(a, b, 0.2).value)
        assert loss >= 0
        cos = np.array([[brute_cos(x, y) for y in b] for x in a])
        off = ~np.eye(n, dtype=bool)
        pos = np.diag(cos)
        separated = all(pos[p] - cos[p, q] >= 0.2 and pos[p] - cos[q, p] >= 0.2
                        for p in range(n) for q in range(n) if off[p, q])
        assert (loss == 0) == separated

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with Tape() as tape:
            loss = triplet_hn(ta, tb, 0.5)
        backward(loss, tape)
        f = lambda: float(triplet_hn(a, b, 0.5).value)
        assert rel_err(ta.grad, numeric_grad(f, a)) <= 1e-4
        assert rel_err(tb.grad, numeric_grad(f, b)) <= 1e-4


class TestRanking:
    def test_gamma_zero(self):
        batch = make_encoded(np.random.default_rng(2))
        total, parts = ranking_loss(batch, 0.2, 0.0)
        assert total.value == parts["l_VG"].value + parts["l_VE"].value

    def test_gamma_recomposition(self):
        batch = make_encoded(np.random.default_rng(3))
        total, p = ranking_loss(batch, 0.2, 0.6)
        assert abs(total.value - (p["l_VG"].value + p["l_VE"].value + 0.6 * p["l_GE"].value)) <= 1e-12

    def test_swap_languages(self):
        batch = make_encoded(np.random.default_rng(4))
        swapped = EncodedBatch({"V": batch["V"], "E": batch["G"], "G": batch["E"]})
        _, a = ranking_loss(batch, 0.2, 0.6)
        _, b = ranking_loss(swapped, 0.2, 0.6)
        assert a["l_VE"].value == b["l_VG"].value and a["l_VG"].value == b["l_VE"].value


def unit_heads(*vectors):
    """One instance with the given head vectors, as a (1, K, H) array."""
    return np.array([vectors], dtype=float)


class TestDiversityPair:
    def test_single_head(self):
        x = np.random.default_rng(5).standard_normal((3, 1, 4))
        assert diversity_pair(x, x, 0.1).value == 0.0

    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_identical_heads_intent(self, k):
        x = np.tile(np.random.default_rng(k).standard_normal((2, 1, 5)), (1, k, 1))
        assert abs(diversity_pair(x, x, 0.1).value - 2 * k * (k - 1) * 0.1) <= 1e-12

    def test_cosine_point_eight_five(self):
        x = unit_heads([1.0, 0.0], [0.85, math.sqrt(1 - 0.85 ** 2)])
        assert diversity_pair(x, x, 0.1).value == 0.0

    def test_orthogonal_heads_cost_nothing(self):
        x = unit_heads([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        assert diversity_pair(x, x, 0.1).value == 0.0

    def test_literal_formula(self):
        x = unit_heads([1.0, 0.0], [0.0, 1.0])
        assert abs(diversity_pair(x, x, 0.1, mode="literal").value - 0.2) <= 1e-15

    def test_head_count_mismatch(self):
        with pytest.raises(ContractError):
            diversity_pair(np.ones((1, 2, 3)), np.ones((1, 3, 3)), 0.1)

    def test_bad_mode_and_margin(self):
        x = np.ones((1, 2, 3))
        with pytest.raises(ContractError):
            diversity_pair(x, x, 0.1, mode="other")
        with pytest.raises(ContractError):
            diversity_pair(x, x, 2.0)

    def test_matches_scratch_sum(self):
        rng = np.random.default_rng(6)
        x, y = rng.standard_normal((3, 3, 4)), rng.standard_normal((3, 3, 4))
        for mode, term in (("intent", lambda s: max(0.0, 0.7 - (1 - s))), ("literal", lambda s: max(0.0, 0.7 - s))):
            expected = sum(term(brute_cos(x[p, k], y[p, r])) for p in range(3) for k in range(3)
                           for r in range(3) if k != r)
            assert abs(diversity_pair(x, y, 0.7, mode).value - expected) <= 1e-12

    def test_intent_monotone_in_similarity(self):
        values = []
        for s in np.linspace(-1, 1, 401):
            x = unit_heads([1.0, 0.0], [s, math.sqrt(max(0.0, 1 - s * s))])
            values.append(float(diversity_pair(x, x, 0.1).value))
        assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))
        assert values[0] == 0.0 and abs(values[-1] - 0.2) <= 1e-12

    def test_kink_has_zero_gradient(self):
        # cosine exactly 0.5 with margin 0.5 puts the literal hinge at its kink
        x = Tensor(unit_heads([1.0, 0.0], [0.5, math.sqrt(0.75)]), requires_grad=True)
        with Tape() as tape:
            loss = diversity_pair(x, x, 0.5, mode="literal")
        backward(loss, tape)
        assert loss.value == 0.0 and not x.grad.any()


class TestDiversityTotal:
    def test_six_term_sum(self):
        batch = make_encoded(np.random.default_rng(7), k=3)
        total, parts = diversity_total(batch, 0.1)
        assert len(parts) == 6
        assert abs(total.value - sum(p.value for p in parts.values())) <= 1e-12

    def test_components_computed_independently(self):
        batch = make_encoded(np.random.default_rng(8), b=3, k=3)
        _, parts = diversity_total(batch, 0.4)
        stacks = {s: np.stack([h.value for h in batch[s].heads], axis=1) for s in "VEG"}
        for name, value in parts.items():
            x, y = stacks[name[2]], stacks[name[3]]
            expected = sum(max(0.0, 0.4 - (1 - brute_cos(x[p, k], y[p, r])))
                           for p in range(3) for k in range(3) for r in range(3) if k != r)
            assert abs(value.value - expected) <= 1e-12, name

    def test_single_head_all_zero(self):
        batch = make_encoded(np.random.default_rng(9), k=1)
        total, parts = diversity_total(batch, 0.1)
        assert total.value == 0.0 and all(p.value == 0.0 for p in parts.values())


class TestTotalLoss:
    def test_beta_zero_is_ranking(self):
        batch = make_encoded(np.random.default_rng(10))
        out = total_loss(batch, RunConfig(beta=0.0))
        assert out.total.value == out.ranking.value

    def test_beta_one(self):
        batch = make_encoded(np.random.default_rng(11))
        out = total_loss(batch, RunConfig())
        assert out.total.value == out.ranking.value + out.diversity.value

    def test_beta_linearity(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            batch = make_encoded(rng, k=3)
            beta = rng.uniform(0.1, 3)
            t0, t1, t2 = (total_loss(batch, RunConfig(beta=b)).total.value for b in (0.0, beta, 2 * beta))
            assert abs((t2 - t0) - 2 * (t1 - t0)) <= 1e-12

    def test_breakdown_columns(self):
        out = total_loss(make_encoded(np.random.default_rng(13)), RunConfig())
        row = out.values()
        assert list(row) == list(out.COLUMNS) + ["total"]
        assert out.is_finite()

    def test_rescaling_representations_is_invisible(self):
        a = total_loss(make_encoded(np.random.default_rng(14)), RunConfig()).total.value
        b = total_loss(make_encoded(np.random.default_rng(14), scale=7.5), RunConfig()).total.value
        assert abs(a - b) <= 1e-12

    def test_gradient_matches_finite_differences(self):
        batch = make_encoded(np.random.default_rng(15), b=3, k=2, h=3)
        cfg = RunConfig(alpha_d=0.9)
        leaves = [h for s in "VEG" for h in batch[s].heads]
        report = T.finite_diff_check(
            lambda ps: total_loss(_rebuild(ps), cfg).total, leaves, 40, rng=0)
        assert report.max_rel_error <= 1e-4


def _rebuild(leaves):
    from diverse_vse.attention import HeadedRepresentation

    k = len(leaves) // 3
    streams = {}
    for i, s in enumerate("VEG"):
        heads = leaves[i * k:(i + 1) * k]
        streams[s] = HeadedRepresentation(heads, T.concat(heads, axis=-1))
    return EncodedBatch(streams)
