import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfb.metrics import (
    Detection, EvalRecord, GroundTruth, InterchangeError, PriorTable, action_scores,
    aggregate_predictions, average_precision, combine_augmentations, frame_ap, iou, load_records, match_detections,
    mean_ap, top_actions, topk_accuracy, topk_hit, write_interchange,
)
from lfb.roi import Box
from oracles import ap_reference


def random_frames(rng, max_dets=10, max_gt=5, classes=2):
    frames = []
    for _ in range(int(rng.integers(1, 4))):
        gts = []
        for _ in range(int(rng.integers(0, max_gt + 1))):
            x, y = rng.uniform(0, 50, size=2)
            gts.append(((x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)),
                        {int(c) for c in rng.choice(classes, size=int(rng.integers(1, classes + 1)), replace=False)}))
        dets = []
        for _ in range(int(rng.integers(0, max_dets + 1))):
            if gts and rng.random() < 0.6:
                bx = np.array(gts[int(rng.integers(len(gts)))][0]) + rng.normal(scale=2.0, size=4)
                bx = (bx[0], bx[1], max(bx[0], bx[2]), max(bx[1], bx[3]))
            else:
                x, y = rng.uniform(0, 50, size=2)
                bx = (x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20))
            dets.append((tuple(float(v) for v in bx), {c: float(rng.random()) for c in range(classes)}))
        frames.append((dets, gts))
    return frames


def to_records(frames):
    return [
        EvalRecord(f"f{i}", [Detection(Box(*b), s) for b, s in dets],
                   [GroundTruth(Box(*b), frozenset(l)) for b, l in gts])
        for i, (dets, gts) in enumerate(frames)
    ]


class TestIou:
    def test_identical(self):
        assert iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_half_offset_unit_squares(self):
        assert iou(Box(0, 0, 1, 1), Box(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate_boxes(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


class TestAp:
    def test_perfect_single(self):
        rec = to_records([([((0, 0, 10, 10), {0: 0.9})], [((0, 0, 10, 10), {0})])])
        assert frame_ap(rec, 0) == 1.0

    def test_all_false(self):
        rec = to_records([([((50, 50, 60, 60), {0: 0.9})], [((0, 0, 10, 10), {0})])])
        assert frame_ap(rec, 0) == 0.0

    def test_constructed_three_dets_two_gt(self):
        frames = [([((0, 0, 10, 10), {0: 0.9}), ((40, 40, 50, 50), {0: 0.8}), ((20, 20, 30, 30), {0: 0.7})],
                   [((0, 0, 10, 10), {0}), ((20, 20, 30, 30), {0})])]
        # TP, FP, TP: envelope precisions 1 and 2/3 over recall steps of 1/2.
        assert frame_ap(to_records(frames), 0) == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert frame_ap(to_records(frames), 0) == pytest.approx(ap_reference(frames, 0), abs=1e-12)

    def test_class_without_gt_scores_zero(self):
        rec = to_records([([((0, 0, 1, 1), {3: 0.5})], [((0, 0, 1, 1), {0})])])
        assert frame_ap(rec, 3) == 0.0
        assert mean_ap(rec, [0, 3]) == pytest.approx(0.0)

    def test_duplicate_detection_is_false_positive(self):
        frames = [([((0, 0, 10, 10), {0: 0.9}), ((0, 0, 10, 10), {0: 0.8})], [((0, 0, 10, 10), {0})])]
        hits, num_gt, pairs = match_detections(to_records(frames), 0)
        assert hits.tolist() == [1, 0] and num_gt == 1 and pairs == [(0, 0, 0)]

    def test_prefers_higher_iou_then_lower_index(self):
        frames = [([((0, 0, 10, 10), {0: 0.9})],
                   [((1, 0, 11, 10), {0}), ((0, 0, 10, 10), {0}), ((0, 0, 10, 10), {0})])]
        _, _, pairs = match_detections(to_records(frames), 0)
        assert pairs == [(0, 0, 1)]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_against_exhaustive_oracle(self, seed):
        frames = random_frames(np.random.default_rng(seed))
        recs = to_records(frames)
        for c in (0, 1):
            assert abs(frame_ap(recs, c) - ap_reference(frames, c)) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_bounds_and_matching_invariants(self, seed):
        frames = random_frames(np.random.default_rng(seed))
        recs = to_records(frames)
        hits, num_gt, pairs = match_detections(recs, 0)
        assert 0.0 <= frame_ap(recs, 0) <= 1.0
        assert len({(f, g) for _, f, g in pairs}) == len(pairs) <= num_gt
        for _, f, g in pairs:
            assert 0 in recs[f].ground_truth[g].labels

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000))
    def test_adding_correct_top_detection_never_hurts(self, seed):
        rng = np.random.default_rng(seed)
        frames = random_frames(rng)
        recs = to_records(frames)
        before = frame_ap(recs, 0)
        hits, _, pairs = match_detections(recs, 0)
        matched = {(f, g) for _, f, g in pairs}
        free = [(fi, gi) for fi, r in enumerate(recs) for gi, g in enumerate(r.ground_truth)
                if 0 in g.labels and (fi, gi) not in matched]
        if not free:
            return
        fi, gi = free[0]
        recs[fi].detections.append(Detection(recs[fi].ground_truth[gi].box, {0: 2.0}))
        assert frame_ap(recs, 0) >= before - 1e-12

    def test_average_precision_direct(self):
        assert average_precision(np.array([1, 0, 1]), 2) == pytest.approx(1 / 2 + 1 / 2 * 2 / 3)
        assert average_precision(np.array([]), 3) == 0.0
        assert average_precision(np.array([0, 1]), 1) == pytest.approx(0.5)
        assert average_precision(np.array([1]), 0) == 0.0


class TestTopk:
    def test_k_equals_classes(self):
        assert topk_hit([0.1, 0.5, 0.2], 0, 3) == 1

    def test_top1(self):
        assert topk_hit([0.1, 0.5, 0.2], 1, 1) == 1
        assert topk_hit([0.1, 0.5, 0.2], 2, 1) == 0

    def test_ties_go_to_lower_index(self):
        assert topk_hit([0.5, 0.5, 0.5], 0, 1) == 1
        assert topk_hit([0.5, 0.5, 0.5], 2, 2) == 0

    def test_against_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            scores = rng.integers(0, 4, size=6).astype(float)
            label, k = int(rng.integers(6)), int(rng.integers(1, 7))
            order = sorted(range(6), key=lambda c: (-scores[c], c))
            assert topk_hit(scores, label, k) == int(label in order[:k])

    def test_accuracy_average(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert topk_accuracy(scores, [0, 1, 1], 1) == pytest.approx(2 / 3)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            topk_hit([0.1, 0.2], 0, 3)


class TestPrior:
    def test_lemon_example(self):
        prior = PriorTable({("cut", "lemon"): 3, ("squeeze", "lemon"): 1})
        assert prior.mu("cut", "lemon") == 0.75 and prior.mu("squeeze", "lemon") == 0.25
        uniform_v = {"cut": 0.5, "squeeze": 0.5}
        scores = action_scores(prior, uniform_v, {"lemon": 1.0})
        assert top_actions(scores, 1) == [("cut", "lemon")]

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        verbs, nouns = [f"v{i}" for i in range(6)], [f"n{i}" for i in range(5)]
        pairs = [(verbs[rng.integers(6)], nouns[rng.integers(5)]) for _ in range(300)]
        prior = PriorTable.from_pairs(pairs)
        m = prior.matrix(verbs, nouns)
        seen = [j for j, n in enumerate(nouns) if prior.noun_counts[n] > 0]
        np.testing.assert_allclose(m[:, seen].sum(axis=0), 1.0, atol=1e-12)

    def test_unseen_pair_scores_zero(self):
        prior = PriorTable({("cut", "lemon"): 2})
        assert action_scores(prior, {"wash": 1.0}, {"lemon": 1.0})[("wash", "lemon")] == 0.0

    def test_uniform_ties(self):
        prior = PriorTable({("a", "x"): 1, ("b", "x"): 1, ("a", "y"): 1, ("b", "y"): 1})
        scores = action_scores(prior, {"a": 0.5, "b": 0.5}, {"x": 0.5, "y": 0.5})
        assert len(set(scores.values())) == 1

    def test_file_round_trip(self, tmp_path):
        prior = PriorTable({("cut", "lemon"): 3, ("squeeze", "lemon"): 1})
        prior.save(tmp_path / "prior.txt")
        assert (tmp_path / "prior.txt").read_text() == "cut lemon 3\nsqueeze lemon 1\n"
        assert PriorTable.load(tmp_path / "prior.txt").counts == prior.counts

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            PriorTable({("a", "b"): -1})


class TestAggregate:
    def test_single_clip(self):
        s = np.array([0.2, 0.7])
        np.testing.assert_array_equal(aggregate_predictions([s]), s)

    def test_max(self):
        assert aggregate_predictions([np.array([0.2]), np.array([0.9])], "max").tolist() == [0.9]

    def test_mean(self):
        assert aggregate_predictions([np.array([0.2]), np.array([0.6])], "mean").tolist() == [pytest.approx(0.4)]

    def test_augmentations_average_by_default(self):
        views = [np.array([0.2, 1.0]), np.array([0.6, 0.0])]
        np.testing.assert_allclose(combine_augmentations(views), [0.4, 0.5])

    def test_ten_clip_max_is_order_invariant_and_idempotent(self):
        rng = np.random.default_rng(0)
        clips = list(rng.random((10, 5)))
        ref = aggregate_predictions(clips, "max")
        for _ in range(5):
            perm = rng.permutation(10)
            np.testing.assert_array_equal(aggregate_predictions([clips[i] for i in perm], "max"), ref)
        np.testing.assert_array_equal(aggregate_predictions([ref, ref], "max"), ref)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_predictions([])


class TestInterchange:
    def test_round_trip(self, tmp_path):
        frames = random_frames(np.random.default_rng(3))
        recs = to_records(frames)
        write_interchange(tmp_path / "d.txt", recs, "detections")
        write_interchange(tmp_path / "g.txt", recs, "gt")
        again = load_records(tmp_path / "d.txt", tmp_path / "g.txt")
        for c in (0, 1):
            assert frame_ap(again, c) == pytest.approx(frame_ap([r for r in recs if r.detections or r.ground_truth], c))

    def test_merges_by_frame_and_box(self, tmp_path):
        (tmp_path / "d.txt").write_text("a,0,0,1,1,0,0.5\na,0,0,1,1,2,0.7\n")
        (tmp_path / "g.txt").write_text("a,0,0,1,1,0\na,0,0,1,1,2\n")
        (rec,) = load_records(tmp_path / "d.txt", tmp_path / "g.txt")
        assert rec.detections[0].scores == {0: 0.5, 2: 0.7}
        assert rec.ground_truth[0].labels == {0, 2}

    @pytest.mark.parametrize("line", ["a,0,0,1,1,0", "a,0,0,x,1,0,0.5", "a,5,0,1,1,0,0.5"])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "d.txt").write_text(line + "\n")
        (tmp_path / "g.txt").write_text("")
        with pytest.raises(InterchangeError):
            load_records(tmp_path / "d.txt", tmp_path / "g.txt")
