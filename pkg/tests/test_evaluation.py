import itertools
import json

import numpy as np
import pytest
import torch
from scipy.optimize import linear_sum_assignment

from helpers import tiny_config
from vtssi.data import SequenceAnnotation
from vtssi.evaluation import (EvalReport, compare_reports, count_accuracy, evaluate, match_objects,
                              matched_errors, position_errors, to_pixels)
from vtssi.model import VTSSIModel


def brute_force(gt, inf, prefix):
    """Enumerate every injective pairing independently of the library routine."""
    G, I = len(gt), len(inf)
    k = min(G, I)
    best = None
    for gs in itertools.combinations(range(G), k):
        for js in itertools.permutations(range(I), k):
            pairs = sorted(zip(gs, js))
            cost = sum(np.linalg.norm(gt[g, :prefix] - inf[j, :prefix], axis=-1).sum() for g, j in pairs)
            if best is None or cost < best[0] - 1e-12 or (abs(cost - best[0]) <= 1e-12 and pairs < best[1]):
                best = (cost, pairs)
    return best


class TestPixels:
    def test_examples(self):
        np.testing.assert_allclose(to_pixels([-1, -1], (50, 50)), [0, 0])
        np.testing.assert_allclose(to_pixels([1, 1], (50, 50)), [49, 49])
        np.testing.assert_allclose(to_pixels([0, 0], (50, 50)), [24.5, 24.5])
        np.testing.assert_allclose(to_pixels([1, -1], (20, 40)), [39, 0])


class TestMatching:
    def test_against_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            G, I = rng.integers(1, 4, size=2)
            gt = rng.uniform(0, 30, (G, 5, 2))
            inf = rng.uniform(0, 30, (I, 5, 2))
            m = match_objects(gt, inf, 3)
            cost, pairs = brute_force(gt, inf, 3)
            assert m == pairs
            c = np.linalg.norm(gt[:, None, :3] - inf[None, :, :3], axis=-1).sum(-1)
            r, cidx = linear_sum_assignment(c)
            np.testing.assert_allclose(c[r, cidx].sum(), cost, rtol=1e-9)

    def test_single_pair(self):
        assert match_objects(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), 2) == [(0, 0)]

    def test_swap(self):
        gt = np.array([[[0, 0]] * 4, [[10, 10]] * 4], dtype=float)
        inf = gt[::-1].copy()
        assert match_objects(gt, inf, 4) == [(0, 1), (1, 0)]

    def test_prefix_only(self):
        gt = np.array([[[0, 0], [0, 0], [50, 50]], [[10, 10], [10, 10], [10, 10]]], dtype=float)
        inf = np.array([[[0, 0], [0, 0], [10, 10]], [[10, 10], [10, 10], [50, 50]]], dtype=float)
        assert match_objects(gt, inf, 2) == [(0, 0), (1, 1)]

    def test_tie_lexicographic(self):
        gt = np.zeros((2, 3, 2))
        inf = np.zeros((2, 3, 2))
        assert match_objects(gt, inf, 3) == [(0, 0), (1, 1)]

    def test_relabel_invariant_error(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            gt = rng.uniform(0, 30, (3, 6, 2))
            inf = rng.uniform(0, 30, (3, 6, 2))
            perm = rng.permutation(3)
            e1 = matched_errors(gt, inf, match_objects(gt, inf, 3))
            e2 = matched_errors(gt, inf[perm], match_objects(gt, inf[perm], 3))
            np.testing.assert_allclose(np.sort(e1.sum(1)), np.sort(e2.sum(1)), atol=1e-12)

    def test_empty(self):
        assert match_objects(np.zeros((0, 3, 2)), np.zeros((2, 3, 2)), 2) == []


class TestErrors:
    def test_three_four_five(self):
        gt = np.zeros((1, 10, 2))
        inf = np.tile([3.0, 4.0], (1, 10, 1))
        e = matched_errors(gt, inf, match_objects(gt, inf, 5))
        inf_curve, pred_curve = position_errors([e], 5)
        np.testing.assert_allclose(inf_curve, 5.0)
        np.testing.assert_allclose(pred_curve, 5.0)

    def test_excluded_sequences(self):
        e = np.ones((2, 4))
        a, _ = position_errors([e, None, 3 * np.ones((1, 4))], 4)
        np.testing.assert_allclose(a, 5.0 / 3.0)
        assert position_errors([None], 2)[0].size == 0

    def test_count_accuracy(self):
        assert count_accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75
        assert count_accuracy([1, 2, 0], [1, 2, 0]) == 1.0
        assert count_accuracy([1] * 5 + [0] * 5, [1] * 10) == 0.5
        assert count_accuracy(np.array([[1, 1], [2, 0]]), np.array([[1, 1], [2, 2]]), "per_frame") == 0.75
        with pytest.raises(ValueError):
            count_accuracy([1], [1, 2])
        with pytest.raises(ValueError):
            count_accuracy(np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            count_accuracy([1], [1], "per_object")

    def test_perfect_tracks(self):
        gt = np.random.default_rng(0).uniform(0, 30, (2, 8, 2))
        a, b = position_errors([matched_errors(gt, gt, match_objects(gt, gt, 4))], 4)
        assert np.all(a == 0) and np.all(b == 0)

    def test_joint_permutation_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            gt, inf = rng.uniform(0, 30, (3, 6, 2)), rng.uniform(0, 30, (3, 6, 2))
            pg, pi = rng.permutation(3), rng.permutation(3)
            e1 = matched_errors(gt, inf, match_objects(gt, inf, 3))
            e2 = matched_errors(gt[pg], inf[pi], match_objects(gt[pg], inf[pi], 3))
            np.testing.assert_allclose(position_errors([e1], 3)[0], position_errors([e2], 3)[0], atol=1e-12)


class _Scene:
    def __init__(self, n_tilde, track):
        self.n_tilde, self._track = n_tilde, track

    def position_track(self):
        return self._track

    inferred_track = position_track


class OffsetModel(torch.nn.Module):
    """Reports fixed counts and the ground truth shifted by (3, 4) pixels."""

    def __init__(self, cfg, counts, centers):
        super().__init__()
        self.cfg, self.mot = cfg, None
        self.counts, self.centers = counts, centers
        self.seen = 0

    def forward(self, x, **_):
        B, T = x.shape[:2]
        H, W = x.shape[2:]
        lo, self.seen = self.seen, self.seen + B
        tracks = torch.zeros(B, 2, T, 2, dtype=torch.float64)
        n = torch.tensor(self.counts[lo:lo + B], dtype=torch.float64)
        for b in range(B):
            c = self.centers[lo + b].transpose(1, 0, 2) + np.array([3.0, 4.0])
            px = torch.as_tensor(c / (np.array([W, H]) - 1) * 2 - 1)
            tracks[b, :c.shape[0]] = px
        return _Scene(n, tracks)


def annotations(S, T, counts, rng):
    out = []
    for s in range(S):
        out.append(SequenceAnnotation(counts[s], rng.uniform(2, 20, (T, counts[s], 2)), [], s, s))
    return out


class TestEvaluate:
    def test_offset_model_end_to_end(self):
        rng = np.random.default_rng(0)
        counts = [1, 2, 2, 0]
        anns = annotations(4, 6, counts, rng)
        model = OffsetModel(tiny_config("find"), [1, 2, 1, 0], [a.centers for a in anns])
        rep = evaluate(model, np.zeros((4, 6, 24, 24)), anns, observe=3, horizon=6, batch_size=3)
        assert rep.count_accuracy == 0.75
        assert rep.n_error_sequences == 2
        np.testing.assert_allclose(rep.inference_error_curve, 5.0, atol=1e-9)
        assert rep.prediction_error_curve is None
        np.testing.assert_allclose(rep.median_inference_error, 5.0, atol=1e-9)
        assert "matching" not in rep.per_sequence[2]
        rep.validate()

    @pytest.mark.parametrize("variant", ["air", "vtssi"])
    def test_untrained_report_valid_and_deterministic(self, variant, tmp_path):
        rng = np.random.default_rng(1)
        anns = annotations(5, 6, [1, 2, 0, 1, 2], rng)
        x = rng.uniform(0, 1, (5, 6, 24, 24)).astype(np.float32)
        model = VTSSIModel(tiny_config(variant))
        a = evaluate(model, x, anns, observe=3, horizon=6, batch_size=2)
        b = evaluate(model, x, anns, observe=3, horizon=6, batch_size=2)
        c = evaluate(model, x, anns, observe=3, horizon=6, batch_size=5)
        a.validate()
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        np.testing.assert_allclose(a.inference_error_curve, c.inference_error_curve, atol=1e-4)
        a.to_json(tmp_path / "r.json")
        assert json.dumps(EvalReport.from_json(tmp_path / "r.json").to_dict()) == \
            json.dumps(json.loads(json.dumps(a.to_dict())))
        if variant == "vtssi":
            assert len(a.prediction_error_curve) in (0, 6)
            assert sorted(a.median_prediction_error) == ["1", "2", "3"]
        else:
            assert a.count_mode == "per_frame"

    def test_horizon_checks(self):
        model = VTSSIModel(tiny_config("vtssi"))
        anns = annotations(1, 6, [1], np.random.default_rng(0))
        with pytest.raises(ValueError):
            evaluate(model, np.zeros((1, 6, 24, 24)), anns, observe=3, horizon=7)
        with pytest.raises(ValueError):
            evaluate(model, np.zeros((1, 6, 24, 24)), anns, observe=5, horizon=4)

    def test_invalid_report(self):
        rep = EvalReport("vtssi", "per_sequence", 1.5, 3, 6, [], None, 0.0, {}, 0, 0)
        with pytest.raises(ValueError):
            rep.validate()


class TestCompare:
    def test_ordering(self):
        def rep(variant, med):
            return EvalReport(variant, "per_sequence", 1.0, 3, 6, [med], None, med, {}, 0, 0)

        out = compare_reports({"air": rep("air", 3.0), "vtssi": rep("vtssi", 1.0)})
        assert out["tracking_beats_air"] is True
        out = compare_reports({"air": rep("air", 1.0), "find": rep("find", 2.0)})
        assert out["tracking_beats_air"] is False
        assert compare_reports({"find": rep("find", 2.0)})["tracking_beats_air"] is None
