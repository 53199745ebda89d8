import json

import numpy as np
import pytest

from core.detector import expand_class_head
from core.evaluation import AP_METHOD, average_precision, evaluate_model, match_detections
from core.exceptions import VocabularyError
from core.geometry import Box, ScoredBox, iou

from tests.conftest import BASE_CLASSES, NEW_CLASS


def _oracle_ap(detections, ground_truth, class_id, iou_thr=0.5):
    """Plain-loop matching and brute-force precision envelope over every PR point."""
    gts = [[g.box for g in image if g.class_id == class_id] for image in ground_truth]
    num_gt = sum(len(g) for g in gts)
    if num_gt == 0:
        return None
    ranked = sorted(
        ((d.score, i, j, d.box) for i, image in enumerate(detections) for j, d in enumerate(image)
         if d.class_id == class_id),
        key=lambda item: (-item[0], item[1], item[2]))
    used = [[False] * len(g) for g in gts]
    points = []
    tp = fp = 0
    for _, image_index, _, box in ranked:
        best, best_iou = None, -1.0
        for k, g in enumerate(gts[image_index]):
            value = iou(box, g)
            if value > best_iou:
                best, best_iou = k, value
        if best is not None and best_iou >= iou_thr and not used[image_index][best]:
            used[image_index][best] = True
            tp += 1
        else:
            fp += 1
        points.append((tp / num_gt, tp / (tp + fp)))
    ap, previous = 0.0, 0.0
    for level in sorted({r for r, _ in points}):
        if level <= previous:
            continue
        ap += (level - previous) * max(p for r, p in points if r >= level)
        previous = level
    return ap


def _random_instance(rng):
    truths, detections = [], []
    for _ in range(int(rng.integers(1, 4))):
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 60, 2)
            gts.append(ScoredBox(Box(x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)), int(rng.integers(2))))
        dets = []
        for _ in range(int(rng.integers(0, 6))):
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(len(gts)))].box
                jitter = rng.normal(scale=2.0, size=4)
                x0, y0 = g.x_min + jitter[0], g.y_min + jitter[1]
                box = Box(x0, y0, max(x0 + 1, g.x_max + jitter[2]), max(y0 + 1, g.y_max + jitter[3]))
            else:
                x, y = rng.uniform(0, 60, 2)
                box = Box(x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30))
            dets.append(ScoredBox(box, int(rng.integers(2)), float(rng.uniform(0.01, 0.99))))
        truths.append(gts)
        detections.append(dets)
    return detections, truths


class TestAveragePrecision:
    def test_perfect_detections(self):
        gt = [[ScoredBox(Box(0, 0, 10, 10), 0), ScoredBox(Box(20, 20, 30, 30), 0)]]
        dets = [[ScoredBox(Box(0, 0, 10, 10), 0, 0.9), ScoredBox(Box(20, 20, 30, 30), 0, 0.8)]]
        assert average_precision(dets, gt, 0) == pytest.approx(1.0)

    def test_no_detections(self):
        assert average_precision([[]], [[ScoredBox(Box(0, 0, 10, 10), 0)]], 0) == 0.0

    def test_no_ground_truth_is_undefined(self):
        assert average_precision([[ScoredBox(Box(0, 0, 1, 1), 0, 0.5)]], [[]], 0) is None

    def test_tp_fp_tp(self):
        gt = [[ScoredBox(Box(0, 0, 10, 10), 0), ScoredBox(Box(20, 20, 30, 30), 0)]]
        dets = [[ScoredBox(Box(0, 0, 10, 10), 0, 0.9), ScoredBox(Box(50, 50, 60, 60), 0, 0.8),
                 ScoredBox(Box(20, 20, 30, 30), 0, 0.7)]]
        assert average_precision(dets, gt, 0) == pytest.approx(5 / 6)

    def test_duplicate_detection_is_a_false_positive(self):
        gt = [[ScoredBox(Box(0, 0, 10, 10), 0)]]
        dets = [[ScoredBox(Box(0, 0, 10, 10), 0, 0.9), ScoredBox(Box(0, 0, 10, 10), 0, 0.8)]]
        _, tp, num_gt = match_detections(dets, gt, 0)
        assert tp.tolist() == [True, False]
        assert num_gt == 1

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            average_precision([[], []], [[]], 0)

    def test_matches_oracle(self, rng):
        for _ in range(200):
            detections, truths = _random_instance(rng)
            for class_id in (0, 1):
                expected = _oracle_ap(detections, truths, class_id)
                actual = average_precision(detections, truths, class_id)
                if expected is None:
                    assert actual is None
                else:
                    assert actual == pytest.approx(expected, abs=1e-9)

    def test_monotone_score_transform(self, rng):
        for _ in range(50):
            detections, truths = _random_instance(rng)
            squared = [[ScoredBox(d.box, d.class_id, d.score ** 2) for d in image] for image in detections]
            assert average_precision(squared, truths, 0) == average_precision(detections, truths, 0)

    def test_tail_false_positive_never_helps(self, rng):
        for _ in range(50):
            detections, truths = _random_instance(rng)
            before = average_precision(detections, truths, 0)
            if before is None:
                continue
            extended = [list(image) for image in detections]
            extended[0].append(ScoredBox(Box(500, 500, 510, 510), 0, 0.001))
            after = average_precision(extended, truths, 0)
            assert after <= before + 1e-12
            assert after == pytest.approx(_oracle_ap(extended, truths, 0), abs=1e-9)


class TestEvaluateModel:
    def test_vocabulary_mismatch(self, base_snapshot, shapes_corpus):
        with pytest.raises(VocabularyError):
            evaluate_model(base_snapshot.to_model(), shapes_corpus.manifest('test'))

    def test_head_expansion_preserves_old_class_ap(self, base_snapshot, shapes_corpus):
        model = base_snapshot.to_model()
        expanded = expand_class_head(model, 1, [NEW_CLASS], seed=0)
        dataset = shapes_corpus.manifest('test', BASE_CLASSES)
        before = evaluate_model(model, dataset, score_thr=0.0, max_candidates=None)
        after = evaluate_model(expanded, dataset, score_thr=0.0, max_candidates=None)
        assert after.per_class_ap == before.per_class_ap

    def test_report(self, base_snapshot, shapes_corpus, tmp_path):
        model = base_snapshot.to_model()
        dataset = shapes_corpus.manifest('test', ['circle', 'square'])
        dataset.classes = ['circle', 'square', 'triangle']
        report = evaluate_model(model, dataset, old_classes=['circle'], scenario='unit')
        assert report.undefined_classes == ['triangle']
        defined = [report.per_class_ap['circle'], report.per_class_ap['square']]
        assert report.map == pytest.approx(float(np.mean(defined)))
        assert report.old_mean == pytest.approx(report.per_class_ap['circle'])
        assert report.new_classes == ['square', 'triangle']
        assert report.settings['ap_method'] == AP_METHOD
        text = report.format_table()
        assert 'mAP:' in text and 'n/a' in text
        saved = json.loads(report.save(tmp_path / 'report.json').read_text())
        assert saved['undefined_classes'] == ['triangle']
        assert saved['scenario'] == 'unit'

    def test_class_order_does_not_change_map(self, base_snapshot, shapes_corpus):
        model = base_snapshot.to_model()
        dataset = shapes_corpus.manifest('test', BASE_CLASSES)
        forward = evaluate_model(model, dataset)
        dataset.classes = list(reversed(dataset.classes))
        backward = evaluate_model(model, dataset)
        assert backward.map == pytest.approx(forward.map)
