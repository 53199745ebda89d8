"""Learning trigger: watches the served model's detections and asks for a new
class once enough consecutive inputs go without a confident detection.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional, Sequence

from core.exceptions import ConfigError
from core.geometry import ScoredBox
from utils.logger import setup_logger

logger = setup_logger('trigger')

NO_ACTION = 'no_action'
LEARNING_REQUEST = 'learning_request'


@dataclass(frozen=True)
class TriggerPolicy:
    unknown_threshold: float = 0.5
    min_observations: int = 3

    def __post_init__(self):
        if not 0.0 <= self.unknown_threshold <= 1.0:
            raise ConfigError(f"unknown_threshold must be in [0, 1], got {self.unknown_threshold}")
        if self.min_observations < 1:
            raise ConfigError(f"min_observations must be >= 1, got {self.min_observations}")

    @classmethod
    def from_settings(cls, trigger: Dict[str, Any]) -> 'TriggerPolicy':
        return cls(float(trigger['unknown_threshold']), int(trigger['min_observations']))


@dataclass
class TriggerDecision:
    action: str
    evidence: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def requested(self) -> bool:
        return self.action == LEARNING_REQUEST

    def to_dict(self) -> Dict[str, Any]:
        return {'action': self.action, 'evidence': list(self.evidence)}


def max_score(detections: Sequence[ScoredBox]) -> float:
    return max((d.score for d in detections), default=0.0)


def trigger_check(window: Sequence[Sequence[ScoredBox]], policy: TriggerPolicy,
                  frame_ids: Optional[Sequence[Any]] = None) -> TriggerDecision:
    """Request learning when the last `min_observations` inputs all lack a confident detection.

    `window` holds one detection list per observed input, oldest first.
    """
    if len(window) < policy.min_observations:
        return TriggerDecision(NO_ACTION)
    start = len(window) - policy.min_observations
    recent = window[start:]
    ids = list(frame_ids)[start:] if frame_ids is not None else list(range(start, len(window)))
    scores = [max_score(d) for d in recent]
    if all(s < policy.unknown_threshold for s in scores):
        evidence = [{'frame': i, 'max_score': s} for i, s in zip(ids, scores)]
        return TriggerDecision(LEARNING_REQUEST, evidence)
    return TriggerDecision(NO_ACTION)


class LearningTrigger:
    """Sliding observation window over the current model's detections.

    The window is the only state; it is cleared after a learning request.
    """

    def __init__(self, policy: TriggerPolicy):
        self.policy = policy
        self.window: Deque[List[ScoredBox]] = deque(maxlen=policy.min_observations)
        self.frame_ids: Deque[Any] = deque(maxlen=policy.min_observations)
        self.observed = 0

    def observe(self, detections: Sequence[ScoredBox], frame_id: Optional[Any] = None) -> TriggerDecision:
        self.window.append(list(detections))
        self.frame_ids.append(self.observed if frame_id is None else frame_id)
        self.observed += 1
        decision = trigger_check(list(self.window), self.policy, list(self.frame_ids))
        if decision.requested:
            logger.info(f"No confident detection in the last {self.policy.min_observations} inputs "
                        f"(threshold {self.policy.unknown_threshold}); requesting learning")
            self.reset()
        return decision

    def reset(self):
        self.window.clear()
        self.frame_ids.clear()
