import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from maskrefine.metrics import (
    COUNTS,
    THRESHOLDS,
    area_thresholds,
    auc,
    average_recall,
    binarize,
    evaluate,
    iou,
    iou_matrix,
    match_and_recall,
    match_count,
    scale_of,
    tight_box,
)
from maskrefine.network import Proposal, ProposalSet
from oracles import brute_force_matches, iou_oracle


def block(shape, y0, x0, h, w):
    m = np.zeros(shape, bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def random_instance(rng, max_items=5, side=4):
    n_p, n_g = rng.integers(1, max_items + 1, size=2)
    density = rng.uniform(0.2, 0.8)
    props = rng.random((n_p, side, side)) < density
    gts = rng.random((n_g, side, side)) < density
    return props, gts


masks4 = arrays(np.bool_, (4, 4))


class TestIoU:
    def test_identical(self):
        m = block((5, 5), 1, 1, 2, 3)
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        assert iou(block((5, 5), 0, 0, 2, 2), block((5, 5), 3, 3, 2, 2)) == 0.0

    def test_one_seventh(self):
        assert iou(block((3, 3), 0, 0, 2, 2), block((3, 3), 1, 1, 2, 2)) == pytest.approx(1 / 7, abs=1e-15)

    def test_empty_union(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((3, 3)), np.zeros((3, 4)))

    @given(a=masks4, b=masks4)
    def test_symmetric_and_matches_oracle(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert iou(a, b) == pytest.approx(iou_oracle(a, b), abs=1e-15)

    def test_matrix(self, rng):
        props, gts = random_instance(rng)
        m = iou_matrix(props, gts)
        assert m.shape == (len(props), len(gts))
        for i, p in enumerate(props):
            for j, g in enumerate(gts):
                assert m[i, j] == pytest.approx(iou_oracle(p, g), abs=1e-15)


class TestBinarize:
    def test_all_half(self):
        assert binarize(np.full((3, 3), 0.5), 0.2).all()

    def test_boundary_inclusive(self):
        np.testing.assert_array_equal(binarize(np.array([0.1, 0.2, 0.3]), 0.2), [False, True, True])

    def test_default_threshold(self):
        np.testing.assert_array_equal(binarize(np.array([0.19, 0.2])), [False, True])

    @given(mask=arrays(np.float64, (5, 5), elements=st.floats(0, 1)), t1=st.floats(0.01, 0.99), t2=st.floats(0.01, 0.99))
    def test_monotone(self, mask, t1, t2):
        lo, hi = sorted((t1, t2))
        assert binarize(mask, hi).sum() <= binarize(mask, lo).sum()


class TestMatching:
    def test_single(self):
        assert match_and_recall(np.array([[0.7]]), [np.ones((2, 2))], 1, 0.5) == 1.0

    def test_one_to_one(self):
        assert match_and_recall(np.array([[0.9, 0.9]]), [np.ones((2, 2))] * 2, 1, 0.5) == 0.5

    def test_masks_input(self):
        gt = block((6, 6), 0, 0, 3, 3)
        prop = block((6, 6), 0, 0, 3, 2)
        assert match_and_recall([prop], [gt], 1, 0.6) == 1.0
        assert match_and_recall([prop], [gt], 1, 0.7) == 0.0

    def test_optimal_beats_greedy_order(self):
        # greedy in GT order would give gt0 proposal 0 and leave gt1 uncovered
        ious = np.array([[0.9, 0.8], [0.6, 0.0]])
        assert match_count(ious, 0.5) == 2

    def test_top_n_only(self):
        ious = np.array([[0.0], [0.9]])
        assert match_and_recall(ious, [np.ones(1)], 1, 0.5) == 0.0
        assert match_and_recall(ious, [np.ones(1)], 2, 0.5) == 1.0

    def test_no_gts(self):
        assert match_and_recall([np.ones((2, 2))], [], 1, 0.5) is None
        assert average_recall([np.ones((2, 2))], [], 1) is None
        assert auc([np.ones((2, 2))], []) is None

    def test_bad_count(self):
        with pytest.raises(ValueError):
            match_and_recall(np.array([[0.7]]), [np.ones(1)], 0, 0.5)

    def test_brute_force_oracle_1000(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            props, gts = random_instance(rng)
            m = iou_matrix(props, gts)
            n = int(rng.integers(1, len(props) + 1))
            for t in (0.3, 0.5, 0.75):
                assert match_and_recall(list(props), list(gts), n, t) == brute_force_matches(m[:n], t) / len(gts)

    @settings(max_examples=300, deadline=None)
    @given(ious=arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                       elements=st.sampled_from([0.0, 0.3, 0.5, 0.55, 0.7, 0.95, 1.0])),
           t=st.sampled_from(THRESHOLDS))
    def test_brute_force_property(self, ious, t):
        assert match_count(ious, t) == brute_force_matches(ious, t)


class TestAverageRecall:
    def _pair(self, inter):
        gt = np.zeros(10, bool)
        gt[:10] = True
        prop = np.zeros(10, bool)
        prop[:inter] = True
        return [prop], [gt]

    def test_iou_070(self):
        props, gts = self._pair(7)
        assert iou(props[0], gts[0]) == 0.7
        assert average_recall(props, gts, 1) == 0.5

    def test_perfect(self):
        props, gts = self._pair(10)
        assert average_recall(props, gts, 1) == 1.0

    def test_iou_049(self):
        assert average_recall(np.array([[0.49]]), [np.ones(1)], 1) == 0.0

    def test_grid(self):
        assert THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_monotone_in_count(self, seed):
        props, gts = random_instance(np.random.default_rng(seed))
        ars = [average_recall(list(props), list(gts), n) for n in range(1, len(props) + 1)]
        assert all(a <= b for a, b in zip(ars, ars[1:]))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_recall_monotone_in_threshold(self, seed):
        props, gts = random_instance(np.random.default_rng(seed))
        rec = [match_and_recall(list(props), list(gts), len(props), t) for t in THRESHOLDS]
        assert all(a >= b for a, b in zip(rec, rec[1:]))


class TestAUC:
    def test_constant_ar(self):
        assert auc(np.array([[0.7]]), [np.ones(1)]) == 0.5

    def test_hand_case(self):
        # proposal 0 covers gt0 at 0.72 (5 thresholds); proposal 2 covers gt1 at 0.93 (9 thresholds)
        ious = np.array([[0.72, 0.0], [0.0, 0.0], [0.0, 0.93]])
        ar1 = 5 / 20
        ar3 = (5 + 9) / 20
        assert auc(ious, [np.ones(1)] * 2, counts=(1, 2, 3)) == pytest.approx((ar1 + ar1 + ar3) / 3, abs=1e-15)

    def test_counts_clipped(self):
        ious = np.array([[0.72, 0.0], [0.0, 0.93]])
        assert auc(ious, [np.ones(1)] * 2) == pytest.approx(14 / 20, abs=1e-15)
        assert COUNTS == (10, 100, 1000)


class TestScale:
    def test_rescaled_thresholds(self):
        small, large = area_thresholds(64)
        assert small == pytest.approx(1024 * (64 / 224) ** 2)
        assert large == pytest.approx(9216 * (64 / 224) ** 2)
        assert area_thresholds(224) == (1024, 9216)

    def test_buckets(self):
        b = (10.0, 50.0)
        assert [scale_of(a, b) for a in (9, 10, 50, 51)] == ["S", "M", "M", "L"]

    def test_tight_box(self):
        assert tight_box(block((6, 7), 1, 2, 3, 4)) == (1, 2, 4, 6)
        assert tight_box(np.zeros((3, 3))) is None


def _proposal_set(masks_and_origins):
    props = [Proposal(y, x, 1.0 - 0.01 * i, m) for i, (m, (y, x)) in enumerate(masks_and_origins)]
    return ProposalSet(props)


class TestEvaluate:
    def test_oracle_proposals_give_one(self):
        canvas = (16, 16)
        gts = [block(canvas, 2, 2, 4, 4), block(canvas, 8, 9, 5, 5)]
        props = _proposal_set([(g[y:y + 8, x:x + 8].astype(float), (y, x)) for g, (y, x) in zip(gts, [(0, 0), (7, 7)])])
        report = evaluate([(props, gts)], patch_side=8)
        assert report.ar[10] == 1.0 and report.auc == 1.0
        assert report.n_gts == 2

    def test_pooled_over_images(self):
        gts_a = [np.ones(4, bool)]
        gts_b = [np.ones(4, bool), np.array([1, 0, 0, 0], bool)]
        results = [([np.ones(4, bool)], gts_a), ([np.ones(4, bool)], gts_b)]
        report = evaluate(results, patch_side=224, counts=(1,))
        # two of three ground truths covered at every threshold
        assert report.ar[1] == pytest.approx(2 / 3)

    def test_missing_scale_is_none(self):
        gts = [np.ones((20, 20), bool)]
        report = evaluate([([np.ones((20, 20), bool)], gts)], patch_side=8)
        d = report.to_dict()
        assert d["AUC_S"] is None and d["AUC_M"] is None and d["AUC_L"] == 1.0

    def test_image_without_gts(self):
        report = evaluate([([np.ones((2, 2), bool)], [])], patch_side=64)
        assert report.auc is None and report.n_images == 1

    def test_report_keys_and_ranges(self):
        rng = np.random.default_rng(0)
        results = [(list(p), list(g)) for p, g in (random_instance(rng, side=6) for _ in range(20))]
        d = evaluate(results, patch_side=64).to_dict()
        assert {"AR10", "AR100", "AR1K", "AUC", "AUC_S", "AUC_M", "AUC_L", "recall_vs_iou"} <= set(d)
        assert d["AR10"] <= d["AR100"] <= d["AR1K"]
        assert all(0.0 <= d[k] <= 1.0 for k in ("AR10", "AR100", "AR1K", "AUC"))
        curve = d["recall_vs_iou"]["10"]
        assert len(curve) == 10 and all(a >= b for a, b in zip(curve, curve[1:]))

    def test_matches_per_image_average_recall(self):
        rng = np.random.default_rng(5)
        props, gts = random_instance(rng, side=6)
        report = evaluate([(list(props), list(gts))], patch_side=224, counts=(2,))
        assert report.ar[2] == pytest.approx(average_recall(list(props), list(gts), 2))
