import pytest

from core.exceptions import ConfigError
from core.geometry import Box, ScoredBox
from core.trigger import LEARNING_REQUEST, NO_ACTION, LearningTrigger, TriggerPolicy, trigger_check


def _dets(*scores):
    return [ScoredBox(Box(0, 0, 10, 10), 0, s) for s in scores]


def test_confident_detection_is_no_action():
    assert trigger_check([_dets(0.95)], TriggerPolicy(0.5, 1)).action == NO_ACTION


def test_empty_window_requests_learning():
    decision = trigger_check([[], [], []], TriggerPolicy(0.5, 3))
    assert decision.action == LEARNING_REQUEST
    assert [e['max_score'] for e in decision.evidence] == [0.0, 0.0, 0.0]


def test_low_scores_request_learning():
    decision = trigger_check([_dets(0.3), _dets(0.2), _dets(0.4)], TriggerPolicy(0.5, 3))
    assert decision.requested
    assert [e['frame'] for e in decision.evidence] == [0, 1, 2]


def test_short_window_waits():
    assert trigger_check([[], []], TriggerPolicy(0.5, 3)).action == NO_ACTION


def test_only_recent_inputs_count():
    window = [_dets(0.1), _dets(0.9), _dets(0.1), _dets(0.2)]
    assert trigger_check(window, TriggerPolicy(0.5, 3)).action == NO_ACTION
    assert trigger_check(window, TriggerPolicy(0.5, 2), frame_ids=list('abcd')).evidence[0]['frame'] == 'c'


def test_threshold_is_exclusive():
    assert trigger_check([_dets(0.5)], TriggerPolicy(0.5, 1)).action == NO_ACTION


def test_trigger_resets_after_request():
    trigger = LearningTrigger(TriggerPolicy(0.5, 2))
    assert trigger.observe(_dets(0.1), 'f1').action == NO_ACTION
    decision = trigger.observe([], 'f2')
    assert decision.requested
    assert [e['frame'] for e in decision.evidence] == ['f1', 'f2']
    assert trigger.observe([], 'f3').action == NO_ACTION
    assert trigger.observe([], 'f4').requested


def test_confident_input_breaks_the_streak():
    trigger = LearningTrigger(TriggerPolicy(0.5, 2))
    trigger.observe([])
    trigger.observe(_dets(0.8))
    assert trigger.observe([]).action == NO_ACTION


@pytest.mark.parametrize('threshold, observations', [(1.5, 3), (-0.1, 3), (0.5, 0)])
def test_invalid_policy(threshold, observations):
    with pytest.raises(ConfigError):
        TriggerPolicy(threshold, observations)


def test_policy_from_settings():
    assert TriggerPolicy.from_settings({'unknown_threshold': 0.3, 'min_observations': 4}) == TriggerPolicy(0.3, 4)
