import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmidistill.attention_metrics import (
    PatternThresholds,
    attention_distance,
    attention_entropy,
    build_report,
    candidate_layers,
    classify_pattern,
    dataset_nmi,
    delta_nmi,
    nmi_head,
    nmi_heads,
    nmi_layer,
    select_target_layer,
)
from nmidistill.errors import NumericError
from nmidistill.io_formats import AttentionStack

from oracles import nmi_oracle, random_attention

# 24 layers: layer 18 = 0.1185 and layer 24 = 0.1882; the other latter-half layers sit at or
# above 0.15. Layer 5 matches s exactly so an unrestricted scan would pick it.
NMI_PROFILE_24 = [0.62, 0.55, 0.47, 0.40, 0.09, 0.31, 0.28, 0.26, 0.24, 0.22, 0.21, 0.20,
                  0.19, 0.18, 0.17, 0.165, 0.16, 0.1185, 0.155, 0.15, 0.152, 0.158, 0.17, 0.1882]


def stochastic_matrices(max_n=8):
    @st.composite
    def build(draw):
        n = draw(st.integers(2, max_n))
        seed = draw(st.integers(0, 2**32 - 1))
        alpha = draw(st.sampled_from([0.02, 0.1, 0.5, 1.0, 5.0, 50.0]))
        return random_attention(np.random.default_rng(seed), (n, n), alpha)
    return build()


class TestNmiHead:
    @pytest.mark.parametrize("n", [2, 3, 4, 8, 16, 49, 196])
    def test_extremes_exact(self, n):
        assert nmi_head(np.eye(n)) == 1.0
        assert nmi_head(np.full((n, n), 1.0 / n)) == 0.0

    def test_three_by_three_oracle(self):
        A = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        assert nmi_head(A) == pytest.approx(nmi_oracle(A), abs=1e-12)
        # I = log 3 - H(0.8, 0.1, 0.1), H(Q) = H(K) = log 3
        row_h = -(0.8 * math.log(0.8) + 2 * 0.1 * math.log(0.1))
        assert nmi_head(A) == pytest.approx((math.log(3) - row_h) / math.log(3), abs=1e-12)

    def test_identical_rows_are_zero(self):
        row = np.array([0.7, 0.2, 0.1, 0.0])
        assert nmi_head(np.tile(row, (4, 1))) == 0.0

    def test_permutation_matrix_is_one(self):
        P = np.eye(5)[[3, 0, 4, 1, 2]]
        assert nmi_head(P) == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_stochastic(self):
        with pytest.raises(NumericError, match="stochastic"):
            nmi_head(np.full((3, 3), 0.3))

    def test_rejects_single_token(self):
        with pytest.raises(NumericError, match="2 tokens"):
            nmi_head(np.ones((1, 1)))

    @pytest.mark.parametrize("seed,n", [(15954, 2), (34018, 3), (172840, 3)])
    def test_nearly_independent_peaked_rows(self, seed, n):
        # rows like [1e-18, 1, 0]: NMI is about 1e-10 and a difference of entropies loses it
        A = random_attention(np.random.default_rng(seed), (n, n), 0.02)
        assert nmi_head(A) == pytest.approx(nmi_oracle(A), abs=1e-11)

    @settings(max_examples=150, deadline=None)
    @given(stochastic_matrices())
    def test_bounds_and_oracle(self, A):
        v = nmi_head(A)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(nmi_oracle(A), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(stochastic_matrices(), st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, A, seed):
        perm = np.random.default_rng(seed).permutation(A.shape[0])
        assert nmi_head(A[perm][:, perm]) == pytest.approx(nmi_head(A), abs=1e-12)

    def test_vectorised_matches_scalar(self):
        A = random_attention(np.random.default_rng(0), (3, 4, 6, 6))
        got = nmi_heads(A)
        want = np.array([[nmi_head(A[i, j]) for j in range(4)] for i in range(3)])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


class TestAggregates:
    def test_layer_mean(self):
        assert nmi_layer([np.eye(4), np.full((4, 4), 0.25)]) == 0.5
        A = random_attention(np.random.default_rng(1), (1, 5, 5))
        assert nmi_layer(A) == nmi_head(A[0])

    def test_layer_three_heads_against_oracle(self):
        A = random_attention(np.random.default_rng(2), (3, 6, 6))
        assert nmi_layer(A) == pytest.approx(np.mean([nmi_oracle(h) for h in A]), abs=1e-12)

    def test_dataset_mean(self):
        eye, uni = np.eye(4), np.full((4, 4), 0.25)
        # five heads mixing identity (NMI 1) and uniform (NMI 0)
        img_a = np.stack([np.stack([eye, uni, uni, uni, uni])])      # 0.2
        img_b = np.stack([np.stack([eye, eye, uni, uni, uni])])      # 0.4
        np.testing.assert_allclose(dataset_nmi([img_a, img_b]), [0.3], atol=1e-15)

    def test_dataset_eight_images_independent_order(self):
        rng = np.random.default_rng(4)
        stacks = [AttentionStack(random_attention(rng, (3, 2, 5, 5))) for _ in range(8)]
        got = dataset_nmi(stacks)
        per_image = np.array([[nmi_layer(s.data[l]) for l in range(3)] for s in stacks])
        want = np.array([math.fsum(per_image[::-1, l]) / 8 for l in range(3)])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_dataset_errors(self):
        with pytest.raises(NumericError):
            dataset_nmi([])
        with pytest.raises(NumericError, match="disagree"):
            dataset_nmi([np.ones((1, 1, 2, 2)) / 2, np.ones((2, 1, 2, 2)) / 2])


class TestEntropyDistance:
    def test_entropy(self):
        assert attention_entropy(np.eye(5)) == 0.0
        assert attention_entropy(np.full((4, 4), 0.25)) == pytest.approx(math.log(4), abs=1e-15)
        A = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
        rows = [0.0, math.log(2), -(0.2 * math.log(0.2) + 0.3 * math.log(0.3) + 0.5 * math.log(0.5))]
        assert attention_entropy(A) == pytest.approx(sum(rows) / 3, abs=1e-15)

    def test_distance(self):
        assert attention_distance(np.eye(6), (2, 3)) == 0.0
        assert attention_distance(np.full((2, 2), 0.5), (1, 2)) == 0.5
        with pytest.raises(NumericError, match="grid"):
            attention_distance(np.eye(4), (3, 3))

    def test_distance_double_loop(self):
        A = random_attention(np.random.default_rng(6), (9, 9))
        total = 0.0
        for i in range(9):
            for j in range(9):
                total += A[i, j] * math.hypot(i // 3 - j // 3, i % 3 - j % 3)
        assert attention_distance(A, (3, 3)) == pytest.approx(total / 9, abs=1e-12)


class TestPatterns:
    @pytest.mark.parametrize("value,label", [(0.1185, "hybrid"), (0.1882, "local"), (0.0, "global"),
                                             (0.06, "hybrid"), (0.12, "hybrid"), (0.0599, "global")])
    def test_classify(self, value, label):
        assert classify_pattern(value) == label

    def test_thresholds_validated(self):
        with pytest.raises(ValueError):
            PatternThresholds(0.2, 0.1)


class TestSelection:
    def test_24_layer_profile(self):
        assert select_target_layer(NMI_PROFILE_24, 0.09, True) == 18
        assert select_target_layer(NMI_PROFILE_24, 0.09, False) == 5

    @pytest.mark.parametrize("s", [0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12])
    def test_24_layer_profile_stable_over_s(self, s):
        assert select_target_layer(NMI_PROFILE_24, s, True) == 18

    def test_ties_go_deepest(self):
        assert select_target_layer([0.3] * 8) == 8
        assert select_target_layer([0.3] * 8, restrict_to_latter_half=False) == 8
        assert select_target_layer([0.5, 0.5, 0.125, 0.375], s=0.25) == 4    # both 0.125 from s

    def test_candidates(self):
        assert candidate_layers(24) == list(range(13, 25))
        assert candidate_layers(7) == [4, 5, 6, 7]
        assert candidate_layers(3, False) == [1, 2, 3]

    def test_errors(self):
        with pytest.raises(ValueError):
            select_target_layer([0.1])
        with pytest.raises(ValueError):
            select_target_layer([0.1, 0.2], s=1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=30),
           st.floats(0.01, 0.99), st.booleans())
    def test_matches_exhaustive_scan(self, values, s, half):
        L = len(values)
        cands = range(L // 2 + 1, L + 1) if half else range(1, L + 1)
        best = min(abs(values[l - 1] - s) for l in cands)
        want = max(l for l in cands if abs(values[l - 1] - s) == best)
        assert select_target_layer(values, s, half) == want

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=2, max_size=24), st.integers(1, 40), st.integers(-10, 10))
    def test_shift_invariance(self, ints, s_int, shift):
        # multiples of 1/64 keep every subtraction exact
        values = [v / 64 for v in ints]
        s = s_int / 64
        if not 0 < s + shift / 64 < 1:
            return
        moved = [v + shift / 64 for v in values]
        assert select_target_layer(moved, s + shift / 64) == select_target_layer(values, s)

    def test_delta_nmi(self):
        np.testing.assert_allclose(delta_nmi([0.0, 0.09, 0.5]), [-0.09, 0.0, -0.41], atol=1e-15)


class TestReport:
    def test_report_invariants(self):
        rng = np.random.default_rng(9)
        stacks = [random_attention(rng, (4, 3, 9, 9)) for _ in range(3)]
        report = build_report(stacks, s=0.09, grid=(3, 3))
        head = np.array(report.per_head_nmi)
        np.testing.assert_allclose(report.per_layer_nmi, head.mean(axis=1), atol=1e-12)
        np.testing.assert_allclose(report.per_layer_nmi, dataset_nmi(stacks), atol=1e-12)
        np.testing.assert_array_equal(report.delta_nmi, -np.abs(np.array(report.per_layer_nmi) - 0.09))
        assert report.target_layer in (3, 4)
        assert all(d is not None and d >= 0 for d in report.per_layer_distance)

    def test_identity_report_json(self):
        report = build_report([np.eye(4).reshape(1, 1, 4, 4)])
        obj = json.loads(report.to_json())
        assert obj["per_layer_nmi"] == [1.0]
        assert obj["layers"][0]["pattern"] == "local"
        assert obj["target_layer"] == 1
