"""
Tests for failure detection and classification
"""
import sys
from pathlib import Path

import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.detection import (
    CONSISTENCY,
    PATTERNS,
    THRESHOLD,
    DetectionConfig,
    analyze_patterns,
    check_consistency,
    classification_trajectory,
    classify_failure,
    run_detectors,
    threshold_trigger,
)
from src.errors import ContractError
from src.models import (
    Action,
    ActionKind,
    ActionStatus,
    FailureEvent,
    FailureSource,
    FailureType,
    KBEntry,
    ReliabilityScore,
    SubtaskNode,
    SubtaskStatus,
    TaskSpec,
    TaskType,
    ToolErrorKind,
    Trajectory,
    ValidationKB,
)

FACT = "Station X altitude is 5 meters."


def reason(step: int, args: str = "", confidence: float = 0.9) -> Action:
    return Action(kind=ActionKind.REASON, step_index=step, args=args, confidence=confidence)


def respond(step: int, output: str, confidence: float = 0.9) -> Action:
    return Action(kind=ActionKind.RESPOND, step_index=step, output=output, confidence=confidence)


def call(step: int, tool: str = "search", ok: bool = True, subtask: str = None) -> Action:
    if ok:
        return Action(kind=ActionKind.TOOL_CALL, step_index=step, tool=tool, confidence=0.8,
                      subtask_id=subtask)
    return Action(kind=ActionKind.TOOL_CALL, step_index=step, tool=tool, confidence=0.8,
                  status=ActionStatus.TOOL_ERROR, error_kind=ToolErrorKind.TIMEOUT, subtask_id=subtask)


def run(index: int, *actions: Action, final_output: str = "", **extra) -> Trajectory:
    return Trajectory(run_index=index, seed=index, actions=actions, final_output=final_output, **extra)


def score(value: float, theta: float = 0.65, step=None) -> ReliabilityScore:
    return ReliabilityScore(C=value, S=value, E=value, R=value, theta=theta, w1=0.4, w2=0.4, w3=0.2, step=step)


@pytest.fixture
def kb():
    return ValidationKB(entries={"fx": KBEntry(id="fx", family=TaskType.MULTI_STEP_REASONING, text=FACT)})


@pytest.fixture
def task():
    return TaskSpec(
        id="msr-test",
        task_type=TaskType.MULTI_STEP_REASONING,
        objective="Report the altitude.",
        subtasks=(
            SubtaskNode(id="s1", description="look up", priority=1),
            SubtaskNode(id="s2", description="summarize", priority=2, deps=("s1",)),
        ),
        validation_refs=("fx",),
        expected_output=FACT,
    )


class TestAnalyzePatterns:
    """Tests for the pattern rules."""

    def test_repeated_tool_failure(self):
        """Three consecutive failures of one tool give one F2 at the third."""
        traj = run(0, reason(0), call(1), call(2, ok=False), call(3, ok=False), call(4, ok=False),
                   respond(5, "x"), final_output="x")
        events = analyze_patterns(traj)
        assert len(events) == 1
        assert events[0].failure_type == FailureType.EXECUTION
        assert events[0].step_index == 4
        assert events[0].tool == "search"
        assert events[0].error_kind == ToolErrorKind.TIMEOUT

    def test_success_resets_streak(self):
        """An Ok call between failures resets the count."""
        traj = run(0, call(0, ok=False), call(1, ok=False), call(2), call(3, ok=False), respond(4, "x"))
        assert analyze_patterns(traj) == []

    def test_loop(self):
        """The same Reason action at steps 1-4 gives one F3."""
        traj = run(0, call(0), reason(1, "think"), reason(2, "think"), reason(3, "think"),
                   reason(4, "think"), respond(5, "x"))
        events = analyze_patterns(traj)
        assert [(e.failure_type, e.step_index) for e in events] == [(FailureType.REASONING_INCONSISTENCY, 4)]

    def test_spread_out_repeats_are_not_a_loop(self):
        """Repeats spread wider than twice the window are progress."""
        actions = [reason(i, "think" if i % 3 == 0 else f"step {i}") for i in range(12)]
        assert analyze_patterns(run(0, *actions, completed=False)) == []

    def test_cascade_gives_f4(self):
        """A failed subtask that blocked dependents is reported as F4."""
        traj = run(0, call(0, ok=False, subtask="s1"), respond(1, ""),
                   cascades={"s1": ("s2",)},
                   subtask_status={"s1": SubtaskStatus.FAILED, "s2": SubtaskStatus.CASCADED})
        events = analyze_patterns(traj)
        assert [e.failure_type for e in events] == [FailureType.WORKFLOW_PROPAGATION]
        assert events[0].subtask_id == "s1"
        assert events[0].step_index == 0

    def test_clean(self):
        """A clean trajectory yields nothing."""
        assert analyze_patterns(run(0, reason(0), call(1), respond(2, "x"))) == []


class TestCheckConsistency:
    """Tests for the majority-disagreement rule."""

    def test_unanimous(self):
        """{X, X, X} has a majority."""
        bundle = [run(i, respond(0, "X"), final_output="X") for i in range(3)]
        assert check_consistency(bundle) is None

    def test_two_of_three(self):
        """{X, X, Y} still has a strict majority."""
        outputs = ["X", "x.", "Y"]
        bundle = [run(i, respond(0, o), final_output=o) for i, o in enumerate(outputs)]
        assert check_consistency(bundle) is None

    def test_split_pair(self):
        """{X, Y} has no strict majority."""
        bundle = [run(0, respond(0, "X"), final_output="X"), run(1, respond(0, "Y"), final_output="Y")]
        event = check_consistency(bundle)
        assert event.failure_type == FailureType.REASONING_INCONSISTENCY
        assert event.source == FailureSource.CONSISTENCY_CHECK
        assert event.run_indices == (0, 1)

    def test_needs_two_runs(self):
        """K < 2 is a contract error."""
        with pytest.raises(ContractError):
            check_consistency([run(0, respond(0, "X"))])


class TestThresholdTrigger:
    """Tests for the R < theta trigger."""

    def test_below(self):
        """R = 0.64 under theta 0.65 fires."""
        event = threshold_trigger(score(0.64))
        assert event.source == FailureSource.THRESHOLD_BREACH
        assert "theta=0.65" in event.evidence

    def test_equal_does_not_fire(self):
        """R = theta does not fire."""
        assert threshold_trigger(score(0.65)) is None

    def test_perfect(self):
        """R = 1 never fires."""
        assert threshold_trigger(score(1.0)) is None

    def test_weakest_component_labels_event(self):
        """A breach driven by E is provisionally labeled F2."""
        low_e = ReliabilityScore(C=1.0, S=1.0, E=0.0, R=0.5, theta=0.65, w1=0.2, w2=0.3, w3=0.5)
        assert threshold_trigger(low_e).failure_type == FailureType.EXECUTION


class TestRunDetectors:
    """Tests for combining detectors."""

    def test_disabled_detectors_are_silent(self):
        """Only enabled detectors contribute events."""
        bundle = [run(0, respond(0, "X"), final_output="X"), run(1, respond(0, "Y"), final_output="Y")]
        scores = [score(0.3)]
        assert run_detectors(bundle, scores, enabled=frozenset({PATTERNS})) == []
        sources = [e.source for e in run_detectors(bundle, scores, enabled=frozenset({CONSISTENCY, THRESHOLD}))]
        assert sources == [FailureSource.CONSISTENCY_CHECK, FailureSource.THRESHOLD_BREACH]

    def test_only_first_breach(self):
        """Per-step scores report the first breach only."""
        scores = [score(0.9, step=0), score(0.5, step=1), score(0.4, step=2)]
        bundle = [run(0, reason(0), respond(1, "X"), reason(2), final_output="X")]
        events = run_detectors(bundle, scores)
        assert [e.step_index for e in events] == [1]

    def test_classification_trajectory(self):
        """The run cited by an event is the one classified."""
        bundle = [run(0, respond(0, "X")), run(1, respond(0, "Y"))]
        event = FailureEvent(failure_type=FailureType.EXECUTION, source=FailureSource.PATTERN_ANALYSIS, run_index=1)
        assert classification_trajectory([event], bundle).run_index == 1
        assert classification_trajectory([], bundle).run_index == 0


class TestClassifyFailure:
    """Tests for the priority-ordered classifier."""

    def test_tool_errors_win(self, task, kb):
        """Tool-error evidence classifies as F2."""
        traj = run(0, call(0, ok=False), respond(1, FACT), final_output=FACT)
        event = FailureEvent(failure_type=FailureType.REASONING_INCONSISTENCY,
                             source=FailureSource.THRESHOLD_BREACH)
        assert classify_failure([event], traj, [traj], task, kb) == FailureType.EXECUTION

    def test_propagation(self, task, kb):
        """A failed subtask with blocked dependents classifies as F4."""
        traj = run(0, reason(0), respond(1, ""), cascades={"s1": ("s2",)},
                   subtask_status={"s1": SubtaskStatus.FAILED, "s2": SubtaskStatus.CASCADED})
        event = FailureEvent(failure_type=FailureType.WORKFLOW_PROPAGATION, source=FailureSource.PATTERN_ANALYSIS)
        assert classify_failure([event], traj, [traj], task, kb) == FailureType.WORKFLOW_PROPAGATION

    def test_hallucination(self, task, kb):
        """Falling confidence plus unsupported output classifies as F1."""
        output = "Station X altitude is 9000 feet above the clouds."
        traj = run(0, reason(0, confidence=0.9), reason(1, "more", confidence=0.6),
                   respond(2, output, confidence=0.4), final_output=output)
        event = FailureEvent(failure_type=FailureType.HALLUCINATION, source=FailureSource.THRESHOLD_BREACH)
        assert classify_failure([event], traj, [traj], task, kb) == FailureType.HALLUCINATION

    def test_supported_output_is_not_hallucination(self, task, kb):
        """Falling confidence alone is not enough for F1."""
        traj = run(0, reason(0, confidence=0.9), reason(1, "more", confidence=0.6),
                   respond(2, FACT, confidence=0.4), final_output=FACT)
        event = FailureEvent(failure_type=FailureType.HALLUCINATION, source=FailureSource.THRESHOLD_BREACH)
        assert classify_failure([event], traj, [traj], task, kb) == FailureType.REASONING_INCONSISTENCY

    def test_contradiction_defaults_to_f3(self, task, kb):
        """Disagreement without harder evidence is F3."""
        bundle = [run(0, respond(0, "X"), final_output="X"), run(1, respond(0, "Y"), final_output="Y")]
        event = check_consistency(bundle)
        assert classify_failure([event], bundle[0], bundle, task, kb) == FailureType.REASONING_INCONSISTENCY

    def test_empty_events(self, task, kb):
        """Classification needs at least one event."""
        traj = run(0, respond(0, FACT), final_output=FACT)
        with pytest.raises(ContractError):
            classify_failure([], traj, [traj], task, kb)


class TestDetectionConfig:
    """Tests for DetectionConfig bounds."""

    def test_theta_bounds(self):
        """theta must lie strictly inside (0, 1)."""
        with pytest.raises(ValueError):
            DetectionConfig(theta=1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
