import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hila import metrics as mt
from hila.errors import ContractError, DataError


def brute_force_fscore(pred_b, gt_b, thr):
    """O(n^2) pairwise-distance oracle for the boundary match."""
    pred_pts = np.argwhere(pred_b)
    gt_pts = np.argwhere(gt_b)
    if len(pred_pts) == 0 and len(gt_pts) == 0:
        return 1.0
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0.0

    def hits(points, targets):
        count = 0
        for p in points:
            d2 = ((targets - p) ** 2).sum(axis=1).min()
            if math.sqrt(d2) <= thr:
                count += 1
        return count / len(points)

    precision = hits(pred_pts, gt_pts)
    recall = hits(gt_pts, pred_pts)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class TestMiou:
    def test_perfect(self, rng):
        lab = rng.integers(0, 4, size=(16, 16)).astype(np.int32)
        per_class, mean = mt.miou(lab, lab, 4)
        assert mean == 1.0

    def test_hand_example(self):
        pred = np.array([[0, 1], [1, 1]])
        label = np.array([[0, 0], [1, 1]])
        per_class, mean = mt.miou(pred, label, 2)
        assert per_class[0] == 0.5
        assert abs(per_class[1] - 2 / 3) < 1e-12
        assert abs(mean - 7 / 12) < 1e-12

    def test_all_ignored(self):
        lab = np.full((4, 4), 255, np.int32)
        per_class, mean = mt.miou(lab % 3, lab, 3)
        assert math.isnan(mean)

    def test_absent_class_excluded(self):
        pred = np.zeros((4, 4), np.int32)
        label = np.zeros((4, 4), np.int32)
        per_class, mean = mt.miou(pred, label, 3)
        assert per_class[0] == 1.0
        assert math.isnan(per_class[1]) and math.isnan(per_class[2])
        assert mean == 1.0

    def test_out_of_range_ids_rejected(self):
        with pytest.raises(DataError):
            mt.miou(np.array([[5]]), np.array([[0]]), 3)

    @given(st.permutations([0, 1, 2]), st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_permutation_equivariance(self, perm, seed):
        gen = np.random.default_rng(seed)
        pred = gen.integers(0, 3, size=(12, 12)).astype(np.int32)
        label = gen.integers(0, 3, size=(12, 12)).astype(np.int32)
        perm = np.array(perm)
        base_per, base_mean = mt.miou(pred, label, 3)
        perm_per, perm_mean = mt.miou(perm[pred], perm[label], 3)
        for c in range(3):
            a, b = base_per[c], perm_per[perm[c]]
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) < 1e-12
        assert abs(base_mean - perm_mean) < 1e-12 or (
            math.isnan(base_mean) and math.isnan(perm_mean)
        )

    def test_accumulators_merge_associatively(self, rng):
        preds = [rng.integers(0, 3, size=(8, 8)).astype(np.int32) for _ in range(3)]
        labels = [rng.integers(0, 3, size=(8, 8)).astype(np.int32) for _ in range(3)]
        whole = mt.ConfusionAccumulator(3)
        for p, l in zip(preds, labels):
            whole.update(p, l)
        left = mt.ConfusionAccumulator(3).update(preds[0], labels[0])
        right = mt.ConfusionAccumulator(3).update(preds[1], labels[1])
        right.update(preds[2], labels[2])
        left.merge(right)
        assert np.array_equal(left.intersection, whole.intersection)
        assert np.array_equal(left.union, whole.union)


class TestBoundaryFscore:
    def test_identical_masks(self, rng):
        lab = rng.integers(0, 3, size=(24, 24)).astype(np.int32)
        per_class, mean = mt.boundary_fscore(lab, lab, 3.0)
        assert all(v == 1.0 for v in per_class.values())
        assert mean == 1.0

    def test_one_pixel_shift_within_threshold(self):
        label = np.zeros((32, 32), np.int32)
        label[8:20, 8:20] = 1
        pred = np.zeros((32, 32), np.int32)
        pred[9:21, 9:21] = 1
        per_class, mean = mt.boundary_fscore(pred, label, 3.0)
        assert mean == 1.0

    def test_disjoint_classes(self):
        label = np.zeros((40, 40), np.int32)
        label[2:6, 2:6] = 1
        pred = np.zeros((40, 40), np.int32)
        pred[30:34, 30:34] = 1
        per_class, _ = mt.boundary_fscore(pred, label, 3.0)
        assert per_class[1] == 0.0

    def test_swap_symmetry(self, rng):
        a = rng.integers(0, 3, size=(20, 20)).astype(np.int32)
        b = rng.integers(0, 3, size=(20, 20)).astype(np.int32)
        _, f_ab = mt.boundary_fscore(a, b, 2.0)
        _, f_ba = mt.boundary_fscore(b, a, 2.0)
        assert abs(f_ab - f_ba) < 1e-12

    def test_imagewise_swap_symmetry(self, rng):
        a = rng.integers(0, 3, size=(20, 20)).astype(np.int32)
        b = rng.integers(0, 3, size=(20, 20)).astype(np.int32)
        assert abs(mt.imagewise_fscore(a, b, 2.0) - mt.imagewise_fscore(b, a, 2.0)) < 1e-12

    def test_relative_threshold_default(self):
        lab = np.zeros((64, 64), np.int32)
        lab[10:30, 10:30] = 1
        _, mean = mt.boundary_fscore(lab, lab, None)
        assert mean == 1.0


class TestImagewiseFscore:
    def test_permuted_ids_give_one(self):
        label = np.zeros((32, 32), np.int32)
        label[4:16, 4:16] = 1
        label[20:28, 20:28] = 2
        perm = np.array([2, 0, 1])
        assert mt.imagewise_fscore(perm[label], label, 3.0) == 1.0

    def test_identical(self, rng):
        lab = rng.integers(0, 4, size=(24, 24)).astype(np.int32)
        assert mt.imagewise_fscore(lab, lab, 3.0) == 1.0

    def test_split_orientation_vs_brute_force(self):
        pred = np.zeros((64, 64), np.int32)
        pred[:, 32:] = 1  # vertical split
        label = np.zeros((64, 64), np.int32)
        label[32:, :] = 1  # horizontal split
        got = mt.imagewise_fscore(pred, label, 3.0)
        want = brute_force_fscore(
            mt.imagewise_boundaries(pred), mt.imagewise_boundaries(label), 3.0
        )
        assert abs(got - want) < 1e-9

    def test_random_masks_vs_brute_force(self, rng):
        for _ in range(4):
            pred = rng.integers(0, 3, size=(20, 24)).astype(np.int32)
            label = rng.integers(0, 3, size=(20, 24)).astype(np.int32)
            for thr in (1.0, 2.5, 4.0):
                got = mt.imagewise_fscore(pred, label, thr)
                want = brute_force_fscore(
                    mt.imagewise_boundaries(pred), mt.imagewise_boundaries(label), thr
                )
                assert abs(got - want) < 1e-9


class TestSquaredEdt:
    def test_matches_brute_force_exactly(self, rng):
        pts = rng.uniform(size=(16, 18)) < 0.08
        pts[0, 0] = True  # guarantee non-empty
        d = mt.squared_edt(pts)
        coords = np.argwhere(pts)
        for r in range(16):
            for c in range(18):
                want = ((coords - [r, c]) ** 2).sum(axis=1).min()
                assert d[r, c] == want

    def test_empty_stays_infinite(self):
        d = mt.squared_edt(np.zeros((4, 4), bool))
        assert np.isinf(d).all()


class TestCropEval:
    def metric(self, p, l):
        return mt.miou(p, l, 4)[1]

    def test_full_crop_equals_uncropped(self, rng):
        pred = rng.integers(0, 4, size=(16, 16)).astype(np.int32)
        label = rng.integers(0, 4, size=(16, 16)).astype(np.int32)
        assert mt.crop_eval(pred, label, 16, 16, self.metric) == self.metric(pred, label)

    def test_crop_excludes_absent_class(self):
        label = np.zeros((8, 8), np.int32)
        label[0, 0] = 3  # only in the border region
        pred = label.copy()
        val = mt.crop_eval(pred, label, 4, 4, lambda p, l: mt.miou(p, l, 4))
        per_class, _ = val
        assert math.isnan(per_class[3])

    def test_hand_center_crop(self):
        pred = np.arange(16).reshape(4, 4) % 4
        label = np.arange(16).reshape(4, 4) % 4
        got = mt.crop_eval(pred, label, 2, 2, lambda p, l: (p.tolist(), l.tolist()))
        assert got == ([[1, 2], [1, 2]], [[1, 2], [1, 2]])

    def test_oversize_rejected(self):
        with pytest.raises(ContractError):
            mt.crop_eval(np.zeros((4, 4)), np.zeros((4, 4)), 8, 8, self.metric)


class TestFlops:
    def test_paper_scale_dot_term(self):
        rep = mt.flops_interlevel(512, 320, 32, 32, 64, 64)
        assert rep.components["bottom_up/dot"] == 32 * 320 * 1024
        assert rep.components["top_down/dot"] == 32 * 320 * 1024

    def test_unit_grid(self):
        rep = mt.flops_interlevel(8, 4, 1, 1, 2, 2)
        assert rep.components["bottom_up/dot"] == 32 * 4

    def test_fc_totals(self):
        d_hi, d_lo = 16, 8
        rep = mt.flops_interlevel(d_hi, d_lo, 4, 4, 8, 8)
        hi, lo = 16, 64
        per_direction = 2 * hi * d_hi * d_lo + 2 * lo * d_lo * d_lo
        assert rep.fc_total == 2 * per_direction
        assert rep.total == rep.fc_total + rep.dot_total

    def test_selfattention_closed_form(self):
        assert mt.flops_selfattention(1, 1, 5) == 4 * 25 + 2 * 5
        assert mt.flops_selfattention(2, 2, 1) == 16 + 32

    def test_reduction_ratio(self):
        # quadratic self-attention term vs windowed inter-level term
        for h, w, d in ((8, 8, 32), (16, 24, 64)):
            quadratic = 2 * d * (h * w) ** 2
            windowed = mt.flops_interlevel(2 * d, d, h, w, 2 * h, 2 * w).components[
                "bottom_up/dot"
            ]
            assert quadratic * 16 == windowed // 2 * h * w * 2

    def test_mac_counter(self):
        c = mt.MacCounter()
        c.add("interlevel_fc", 10)
        c.add("interlevel_fc", 5)
        c.add("interlevel_dot", 7)
        assert c.total("interlevel_fc") == 15
        assert c.total() == 22
