import math

import pytest
import torch

from core.detector import RawPrediction, build_detector, expand_class_head
from core.distillation import (DistillConfig, FrozenTeacher, TeacherSelection, TrainingBatch, box_distill_loss,
                               class_columns_for, class_distill_loss, feature_distill_loss, select_teacher_boxes,
                               total_loss)
from core.exceptions import DistillationError
from core.geometry import Box, ScoredBox

from tests.conftest import tiny_detector_config

TERMS = ('dist_class', 'dist_box', 'dist_feat')


@pytest.fixture
def teacher_model():
    return build_detector(tiny_detector_config(), ['a', 'b'], seed=0).double()


@pytest.fixture
def batch():
    generator = torch.Generator().manual_seed(7)
    images = torch.rand(2, 3, 16, 16, generator=generator, dtype=torch.float64)
    return TrainingBatch(images, [[ScoredBox(Box(2, 2, 14, 14), 2)], []], ['new', 'exemplar'])


def _perturbed_student(teacher_model):
    student = expand_class_head(teacher_model, 1, ['new'], seed=1)
    generator = torch.Generator().manual_seed(11)
    with torch.no_grad():
        for p in student.parameters():
            p.add_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * 0.05)
    return student


def _directional_error(fn, params, seed=0):
    """Relative error between analytic and central-difference slope along a mixed direction."""
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    flat_grad = torch.cat([g.reshape(-1) for g in grads])
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(flat_grad.shape, generator=generator, dtype=flat_grad.dtype)
    direction = flat_grad / flat_grad.norm() + 0.5 * noise / noise.norm()
    analytic = float(flat_grad @ direction)

    eps = 1e-6
    chunks = torch.split(direction, [p.numel() for p in params])

    def shift(scale):
        with torch.no_grad():
            for p, d in zip(params, chunks):
                p.add_(scale * d.reshape(p.shape))

    shift(eps)
    with torch.no_grad():
        plus = float(fn())
    shift(-2 * eps)
    with torch.no_grad():
        minus = float(fn())
    shift(eps)
    numeric = (plus - minus) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


class TestWorkedExamples:
    def test_class_distill_identity(self):
        probs = torch.rand(5, 3)
        assert class_distill_loss(probs, probs.clone()).item() == 0.0

    def test_class_distill_two_classes(self):
        loss = class_distill_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.5, 0.5]]))
        assert loss.item() == pytest.approx(0.25)

    def test_class_distill_needs_old_classes(self):
        with pytest.raises(DistillationError):
            class_distill_loss(torch.zeros(3, 0), torch.zeros(3, 0))

    def test_class_distill_shape_mismatch(self):
        with pytest.raises(DistillationError):
            class_distill_loss(torch.zeros(3, 2), torch.zeros(3, 3))

    def test_box_distill_single_residual(self):
        selection = TeacherSelection(torch.tensor([1]), torch.zeros(1, 4), torch.tensor([0.9]))
        student = torch.zeros(3, 4)
        student[1, 0] = 0.5
        assert box_distill_loss(selection, student).item() == pytest.approx(0.125)

    def test_box_distill_empty_selection(self):
        selection = TeacherSelection(torch.zeros(0, dtype=torch.long), torch.zeros(0, 4), torch.zeros(0))
        assert box_distill_loss(selection, torch.ones(3, 4)).item() == 0.0

    def test_feature_distill_values(self):
        teacher = [torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 2, 2)]
        student = [torch.full((1, 2, 3, 3), 2.0), torch.full((1, 2, 2, 2), 0.5)]
        assert feature_distill_loss(teacher[:1], student[:1]).item() == pytest.approx(1.5)
        assert feature_distill_loss(teacher, student).item() == pytest.approx(1.5 + 0.125)
        assert feature_distill_loss(teacher, [t.clone() for t in teacher]).item() == 0.0

    def test_feature_distill_shape_mismatch(self):
        with pytest.raises(DistillationError):
            feature_distill_loss([torch.zeros(1, 2, 3, 3)], [torch.zeros(1, 2, 2, 2)])


class TestSelectTeacherBoxes:
    @staticmethod
    def _prediction(hot_anchor=None):
        logits = torch.full((1, 2, 2, 1, 2), -20.0)
        if hot_anchor is not None:
            row, col = divmod(hot_anchor, 2)
            logits[0, row, col, 0, 1] = 20.0
        offsets = torch.arange(16, dtype=torch.float32).reshape(1, 2, 2, 1, 4)
        return RawPrediction([torch.zeros(1, 1, 2, 2)], [logits], [offsets])

    def test_saturates_at_anchor_count(self):
        selection = select_teacher_boxes(self._prediction(), k_box=10)
        assert len(selection) == 4
        # all scores tie, so the order is the anchor order
        assert selection.indices.tolist() == [0, 1, 2, 3]

    def test_forced_anchor_is_selected(self):
        selection = select_teacher_boxes(self._prediction(hot_anchor=2), k_box=1)
        assert selection.indices.tolist() == [2]
        assert selection.offsets.tolist() == [[8.0, 9.0, 10.0, 11.0]]

    def test_rejects_zero_k(self):
        with pytest.raises(DistillationError):
            select_teacher_boxes(self._prediction(), k_box=0)


class TestTotalLoss:
    def test_distillation_is_zero_at_initialization(self, teacher_model, batch):
        teacher = FrozenTeacher(teacher_model)
        student = expand_class_head(teacher_model, 1, ['new'], seed=1)
        breakdown = total_loss(batch, student, teacher, DistillConfig(k_box=2))
        for term in TERMS:
            assert abs(getattr(breakdown, term).item()) < 1e-10

    def test_all_terms_finite_and_non_negative(self, teacher_model, batch):
        breakdown = total_loss(batch, _perturbed_student(teacher_model), FrozenTeacher(teacher_model),
                               DistillConfig(k_box=2))
        values = breakdown.as_floats()
        assert all(math.isfinite(v) and v >= 0 for v in values.values())
        parts = values['focal'] + values['regression'] + values['dist_class'] + values['dist_box'] + values['dist_feat']
        assert values['total'] == pytest.approx(parts)

    def test_reduces_to_fine_tuning(self, teacher_model, batch):
        cfg = DistillConfig(lambda1=0.7, lambda2=0.0, lambda3=0.0, lambda4=0.0, k_box=2)
        breakdown = total_loss(batch, _perturbed_student(teacher_model), FrozenTeacher(teacher_model), cfg)
        assert breakdown.total.item() == (breakdown.focal + 0.7 * breakdown.regression).item()

    @pytest.mark.parametrize('term', TERMS)
    def test_gradients_match_finite_differences(self, teacher_model, batch, term):
        teacher = FrozenTeacher(teacher_model)
        student = _perturbed_student(teacher_model)
        params = [p for p in student.parameters() if p.requires_grad]
        assert sum(p.numel() for p in params) <= 5000
        cfg = DistillConfig(k_box=2)
        error = _directional_error(lambda: getattr(total_loss(batch, student, teacher, cfg), term), params)
        assert error < 1e-4

    def test_confident_anchor_mode(self, teacher_model, batch):
        cfg = DistillConfig(k_box=2, class_distill_anchors='confident', confident_threshold=0.0)
        breakdown = total_loss(batch, _perturbed_student(teacher_model), FrozenTeacher(teacher_model), cfg)
        assert math.isfinite(breakdown.dist_class.item())

    def test_student_must_be_larger(self, teacher_model):
        batch = TrainingBatch(torch.rand(1, 3, 16, 16, dtype=torch.float64), [[ScoredBox(Box(2, 2, 14, 14), 0)]])
        with pytest.raises(DistillationError):
            total_loss(batch, teacher_model, FrozenTeacher(teacher_model), DistillConfig())

    def test_without_teacher(self, teacher_model):
        images = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        batch = TrainingBatch(images, [[ScoredBox(Box(2, 2, 14, 14), 0)]])
        breakdown = total_loss(batch, teacher_model, None, DistillConfig())
        assert breakdown.dist_class.item() == 0.0
        assert breakdown.total.item() == pytest.approx((breakdown.focal + breakdown.regression).item())


class TestFrozenTeacher:
    def test_detects_mutation(self, teacher_model):
        teacher = FrozenTeacher(teacher_model)
        teacher.verify_unchanged()
        with torch.no_grad():
            next(teacher.model.parameters()).add_(1.0)
        with pytest.raises(DistillationError):
            teacher.verify_unchanged()

    def test_is_a_copy(self, teacher_model):
        teacher = FrozenTeacher(teacher_model)
        with torch.no_grad():
            next(teacher_model.parameters()).add_(1.0)
        teacher.verify_unchanged()
        assert not any(p.requires_grad for p in teacher.model.parameters())


class TestConfig:
    def test_rejects_negative_lambda(self):
        with pytest.raises(DistillationError):
            DistillConfig(lambda3=-1.0)

    def test_rejects_unknown_scope(self):
        with pytest.raises(DistillationError):
            DistillConfig(focal_scope='old')

    def test_auto_scope(self):
        assert DistillConfig().resolved_focal_scope == 'new'
        assert DistillConfig(lambda2=0.0).resolved_focal_scope == 'all'

    def test_class_columns(self):
        columns = class_columns_for(['new', 'exemplar'], num_old=2, num_total=3, scope='new')
        assert columns.tolist() == [[False, False, True], [True, True, False]]
        assert class_columns_for(['new'], 2, 3, 'all').tolist() == [[True, True, True]]
