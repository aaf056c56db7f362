"""
Hybrid failure detection
Execution-pattern analysis, output-consistency checking and the reliability
threshold trigger, plus classification of what they find into F1-F4.

Detectors only ever see trajectories and scores. Injection ground truth is
never passed in.
"""
import logging
from collections import Counter
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from src.errors import ContractError
from src.models import (
    ActionKind,
    ActionStatus,
    FailureEvent,
    FailureSource,
    FailureType,
    ReliabilityScore,
    SubtaskStatus,
    TaskSpec,
    Trajectory,
    ValidationKB,
)
from src.reliability import normalize_tokens, semantic_score

logger = logging.getLogger(__name__)

PATTERNS = "patterns"
CONSISTENCY = "consistency"
THRESHOLD = "threshold"
ALL_DETECTORS: FrozenSet[str] = frozenset({PATTERNS, CONSISTENCY, THRESHOLD})

# weakest reliability component -> provisional label of a threshold breach
COMPONENT_LABELS = {
    "S": FailureType.HALLUCINATION,
    "E": FailureType.EXECUTION,
    "C": FailureType.REASONING_INCONSISTENCY,
}


class DetectionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta: float = Field(default=0.65, gt=0.0, lt=1.0)
    repeated_failure_n: int = Field(default=3, ge=1)
    loop_window: int = Field(default=4, ge=2)
    confidence_window: Literal[3] = 3
    contradiction_rule: Literal["majority_disagreement"] = "majority_disagreement"


def _repeated_failures(traj: Trajectory, n: int) -> List[FailureEvent]:
    events = []
    streaks: Dict[str, int] = {}
    for action in traj.actions:
        if action.kind != ActionKind.TOOL_CALL:
            continue
        if action.status == ActionStatus.OK:
            streaks[action.tool] = 0
            continue
        streaks[action.tool] = streaks.get(action.tool, 0) + 1
        if streaks[action.tool] == n:
            events.append(FailureEvent(
                failure_type=FailureType.EXECUTION,
                source=FailureSource.PATTERN_ANALYSIS,
                step_index=action.step_index,
                evidence=f"tool {action.tool} failed {n} consecutive times ({action.error_kind.value})",
                run_index=traj.run_index,
                tool=action.tool,
                error_kind=action.error_kind,
                subtask_id=action.subtask_id,
            ))
    return events


def _loops(traj: Trajectory, window: int) -> List[FailureEvent]:
    positions: Dict[Tuple[str, str, str], List[int]] = {}
    for action in traj.actions:
        if action.status != ActionStatus.OK:
            continue
        key = (action.kind.value, action.tool or "", action.args)
        positions.setdefault(key, []).append(action.step_index)

    events = []
    for key, steps in positions.items():
        for i in range(len(steps) - window + 1):
            if steps[i + window - 1] - steps[i] < 2 * window:
                events.append(FailureEvent(
                    failure_type=FailureType.REASONING_INCONSISTENCY,
                    source=FailureSource.PATTERN_ANALYSIS,
                    step_index=steps[i + window - 1],
                    evidence=f"{key[0]} '{key[2]}' repeated {window} times without progress",
                    run_index=traj.run_index,
                    tool=key[1] or None,
                ))
                break
    return events


def _dependency_breaks(traj: Trajectory) -> List[FailureEvent]:
    events = []
    for failed, dependents in sorted(traj.cascades.items()):
        if not dependents:
            continue
        steps = [action.step_index for action in traj.actions if action.subtask_id == failed]
        events.append(FailureEvent(
            failure_type=FailureType.WORKFLOW_PROPAGATION,
            source=FailureSource.PATTERN_ANALYSIS,
            step_index=steps[-1] if steps else None,
            evidence=f"subtask {failed} failed, blocking {','.join(dependents)}",
            run_index=traj.run_index,
            subtask_id=failed,
        ))
    return events


def analyze_patterns(traj: Trajectory, cfg: Optional[DetectionConfig] = None) -> List[FailureEvent]:
    """
    Pattern rules over a single run.

    Repeated tool failures give F2, non-progressing loops give F3, and a
    failed subtask that left its dependents unrun gives F4.
    """
    cfg = cfg or DetectionConfig()
    events = (
        _repeated_failures(traj, cfg.repeated_failure_n)
        + _loops(traj, cfg.loop_window)
        + _dependency_breaks(traj)
    )
    return sorted(events, key=lambda event: -1 if event.step_index is None else event.step_index)


def check_consistency(
    bundle: Sequence[Trajectory], cfg: Optional[DetectionConfig] = None
) -> Optional[FailureEvent]:
    if len(bundle) < 2:
        raise ContractError(f"consistency check needs at least 2 runs, got {len(bundle)}")

    outputs = [tuple(normalize_tokens(traj.final_output)) for traj in bundle]
    _, top = Counter(outputs).most_common(1)[0]
    if 2 * top > len(bundle):
        return None

    runs = tuple(sorted(traj.run_index for traj in bundle))
    last_step = max(len(traj.actions) for traj in bundle) - 1
    return FailureEvent(
        failure_type=FailureType.REASONING_INCONSISTENCY,
        source=FailureSource.CONSISTENCY_CHECK,
        step_index=max(last_step, 0),
        evidence=f"no majority among {len(bundle)} final outputs (largest group {top})",
        run_indices=runs,
    )


def threshold_trigger(score: ReliabilityScore) -> Optional[FailureEvent]:
    if not score.R < score.theta:
        return None
    components = {"S": score.S, "E": score.E, "C": score.C}
    weakest = min(components, key=lambda name: components[name])
    return FailureEvent(
        failure_type=COMPONENT_LABELS[weakest],
        source=FailureSource.THRESHOLD_BREACH,
        step_index=score.step,
        evidence=(
            f"R={score.R:.4f} < theta={score.theta:.2f} "
            f"(C={score.C:.4f}, S={score.S:.4f}, E={score.E:.4f})"
        ),
    )


def run_detectors(
    bundle: Sequence[Trajectory],
    scores: Sequence[ReliabilityScore],
    cfg: Optional[DetectionConfig] = None,
    enabled: FrozenSet[str] = ALL_DETECTORS,
) -> List[FailureEvent]:
    """All enabled detectors: pattern events by run, then consistency, then the first breach."""
    cfg = cfg or DetectionConfig()
    events: List[FailureEvent] = []
    if PATTERNS in enabled:
        for traj in bundle:
            events.extend(analyze_patterns(traj, cfg))
    if CONSISTENCY in enabled and len(bundle) >= 2:
        event = check_consistency(bundle, cfg)
        if event is not None:
            events.append(event)
    if THRESHOLD in enabled:
        for score in scores:
            event = threshold_trigger(score)
            if event is not None:
                events.append(event)
                break
    for event in events:
        logger.debug(f"{event.source.value}: {event.failure_type.value} {event.evidence}")
    return events


def classification_trajectory(events: Sequence[FailureEvent], bundle: Sequence[Trajectory]) -> Trajectory:
    """The run cited by the first event that names one, else the first run."""
    by_index = {traj.run_index: traj for traj in bundle}
    for event in events:
        if event.run_index is not None and event.run_index in by_index:
            return by_index[event.run_index]
    return bundle[0]


def _has_tool_errors(events: Sequence[FailureEvent], traj: Trajectory) -> bool:
    if any(event.error_kind is not None for event in events):
        return True
    return any(action.status == ActionStatus.TOOL_ERROR for action in traj.actions)


def _has_propagation(traj: Trajectory, task: TaskSpec) -> bool:
    if any(dependents for dependents in traj.cascades.values()):
        return True
    broken = {SubtaskStatus.FAILED, SubtaskStatus.CASCADED}
    for node in task.subtasks:
        if traj.subtask_status.get(node.id) != SubtaskStatus.FAILED:
            continue
        if any(traj.subtask_status.get(dep) in broken for dep in node.deps):
            return True
    return False


def _confidence_degrading(traj: Trajectory, window: int) -> bool:
    recent = [action.confidence for action in traj.actions[-window:]]
    if len(recent) < window:
        return False
    return all(later < earlier for earlier, later in zip(recent, recent[1:]))


def classify_failure(
    events: Sequence[FailureEvent],
    traj: Trajectory,
    bundle: Sequence[Trajectory],
    task: TaskSpec,
    kb: ValidationKB,
    jaccard_threshold: float = 0.6,
    window: int = 3,
) -> FailureType:
    """
    Label a detected failure. Hard evidence wins over soft evidence:
    tool errors (F2), then broken dependencies (F4), then degrading
    confidence with unsupported claims (F1), and F3 otherwise.
    """
    if not events:
        raise ContractError("cannot classify without failure events")

    if _has_tool_errors(events, traj):
        return FailureType.EXECUTION
    if _has_propagation(traj, task):
        return FailureType.WORKFLOW_PROPAGATION
    if _confidence_degrading(traj, window):
        if semantic_score(traj.final_output, kb, task, jaccard_threshold) < 0.5:
            return FailureType.HALLUCINATION
    return FailureType.REASONING_INCONSISTENCY
