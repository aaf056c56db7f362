"""
Core domain model for the Aegis runtime
Tasks, subtask DAGs, actions, trajectories, tools, failures and scores.
"""
import logging
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

FROZEN = ConfigDict(frozen=True, extra="forbid")
WEIGHT_TOLERANCE = 1e-9
SCORE_TOLERANCE = 1e-12


class TaskType(str, Enum):
    MULTI_STEP_REASONING = "multi_step_reasoning"
    API_ORCHESTRATION = "api_orchestration"
    DOCUMENT_PROCESSING = "document_processing"


class SubtaskStatus(str, Enum):
    PENDING = "pending"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    EXCLUDED = "excluded"
    CASCADED = "cascaded"


class ActionKind(str, Enum):
    REASON = "reason"
    TOOL_CALL = "toolcall"
    RESPOND = "respond"


class ActionStatus(str, Enum):
    OK = "ok"
    TOOL_ERROR = "tool_error"


class ToolErrorKind(str, Enum):
    TIMEOUT = "timeout"
    REFUSAL = "refusal"
    MALFORMED = "malformed"
    UNAVAILABLE = "unavailable"


class FailureType(str, Enum):
    HALLUCINATION = "F1"
    EXECUTION = "F2"
    REASONING_INCONSISTENCY = "F3"
    WORKFLOW_PROPAGATION = "F4"


class FailureSource(str, Enum):
    PATTERN_ANALYSIS = "pattern_analysis"
    CONSISTENCY_CHECK = "consistency_check"
    THRESHOLD_BREACH = "threshold_breach"


class HealingStrategy(str, Enum):
    REPLAN = "replan"
    PROMPT_CORRECTION = "prompt_correction"
    TOOL_RESELECTION = "tool_reselection"


class Outcome(str, Enum):
    SUCCEEDED = "succeeded"
    FAILED = "failed"


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

class SubtaskNode(BaseModel):
    """One node of a task's dependency DAG. Lower priority runs earlier."""

    model_config = FROZEN

    id: str
    description: str
    priority: int
    deps: Tuple[str, ...] = ()
    required_capability: str = ""
    status: SubtaskStatus = SubtaskStatus.PENDING

    @field_validator("deps", mode="before")
    @classmethod
    def _canonical_deps(cls, value: Any) -> Tuple[str, ...]:
        return tuple(sorted(set(value or ())))


class TaskSpec(BaseModel):
    """
    A task objective decomposed into subtasks.

    DAG invariants are not enforced at construction; loaders run
    validate_task() so malformed corpora report every violation at once.
    """

    model_config = FROZEN

    id: str
    task_type: TaskType
    objective: str
    subtasks: Tuple[SubtaskNode, ...]
    validation_refs: Tuple[str, ...] = ()
    expected_output: str = ""

    def by_id(self) -> Dict[str, SubtaskNode]:
        return {node.id: node for node in self.subtasks}

    def statuses(self) -> Dict[str, SubtaskStatus]:
        return {node.id: node.status for node in self.subtasks}

    def with_statuses(self, statuses: Dict[str, SubtaskStatus]) -> "TaskSpec":
        nodes = tuple(
            node.model_copy(update={"status": statuses.get(node.id, node.status)})
            for node in self.subtasks
        )
        return self.model_copy(update={"subtasks": nodes})

    def dependents(self) -> Dict[str, List[str]]:
        """Map subtask id -> ids of subtasks that list it as a dependency."""
        result: Dict[str, List[str]] = {node.id: [] for node in self.subtasks}
        for node in self.subtasks:
            for dep in node.deps:
                if dep in result:
                    result[dep].append(node.id)
        return {key: sorted(value) for key, value in result.items()}

    def terminal_ids(self) -> List[str]:
        """Subtasks nothing depends on."""
        return sorted(key for key, value in self.dependents().items() if not value)


def dependency_graph(task: TaskSpec) -> nx.DiGraph:
    """Edges point from a dependency to the subtask that needs it."""
    graph = nx.DiGraph()
    ids = {node.id for node in task.subtasks}
    for node in task.subtasks:
        graph.add_node(node.id)
        for dep in node.deps:
            if dep in ids:
                graph.add_edge(dep, node.id)
    return graph


def validate_task(task: TaskSpec) -> List[str]:
    """
    Return every invariant violation of a task; empty list means valid.

    Checks duplicate ids, non-positive priorities, dangling dependencies
    and dependency cycles.
    """
    violations: List[str] = []

    seen = set()
    for node in task.subtasks:
        if node.id in seen:
            violations.append(f"duplicate id {node.id}")
        seen.add(node.id)

    for node in sorted(task.subtasks, key=lambda n: n.id):
        if node.priority < 1:
            violations.append(f"bad priority {node.id}: {node.priority}")

    for node in sorted(task.subtasks, key=lambda n: n.id):
        for dep in node.deps:
            if dep not in seen:
                violations.append(f"dangling dep {dep}")

    cycles = sorted(sorted(cycle) for cycle in nx.simple_cycles(dependency_graph(task)))
    for cycle in cycles:
        violations.append(f"cycle: {','.join(cycle)}")

    if violations:
        logger.debug(f"Task {task.id} has {len(violations)} violation(s)")
    return violations


def _sort_key(node: SubtaskNode) -> Tuple[int, str]:
    return (node.priority, node.id)


def topo_ready(task: TaskSpec) -> List[str]:
    """Pending subtasks whose dependencies all succeeded, by (priority, id)."""
    statuses = task.statuses()
    ready = [
        node for node in task.subtasks
        if node.status == SubtaskStatus.PENDING
        and all(statuses.get(dep) == SubtaskStatus.SUCCEEDED for dep in node.deps)
    ]
    return [node.id for node in sorted(ready, key=_sort_key)]


def execution_order(task: TaskSpec) -> List[str]:
    """
    Ordered executable view of the plan.

    Priority-driven Kahn traversal over Pending subtasks, treating Succeeded
    subtasks as already done. Nodes blocked by Failed, Excluded or Cascaded
    dependencies are left out.
    """
    statuses = task.statuses()
    done = {key for key, value in statuses.items() if value == SubtaskStatus.SUCCEEDED}
    pending = [node for node in task.subtasks if node.status == SubtaskStatus.PENDING]
    order: List[str] = []
    while True:
        ready = [
            node for node in pending
            if node.id not in order and all(dep in done for dep in node.deps)
        ]
        if not ready:
            return order
        chosen = min(ready, key=_sort_key)
        order.append(chosen.id)
        done.add(chosen.id)


# ---------------------------------------------------------------------------
# Actions and trajectories
# ---------------------------------------------------------------------------

class Action(BaseModel):
    """One agent step: a reasoning step, a tool call or the final response."""

    model_config = FROZEN

    kind: ActionKind
    step_index: int = Field(ge=0)
    tool: Optional[str] = None
    args: str = ""
    output: str = ""
    confidence: float = Field(ge=0.0, le=1.0)
    status: ActionStatus = ActionStatus.OK
    error_kind: Optional[ToolErrorKind] = None
    sim_time_ms: int = Field(default=0, ge=0)
    subtask_id: Optional[str] = None
    subtask_failed: bool = False
    distribution: Optional[Tuple[float, ...]] = None
    attempt: int = Field(default=1, ge=1)
    backoff_ms: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shape(self) -> "Action":
        if (self.tool is not None) != (self.kind == ActionKind.TOOL_CALL):
            raise ValueError("tool is required for tool calls and forbidden otherwise")
        if (self.error_kind is not None) != (self.status == ActionStatus.TOOL_ERROR):
            raise ValueError("error_kind must be set exactly when status is tool_error")
        return self


class Trajectory(BaseModel):
    """One execution run of a task."""

    model_config = FROZEN

    run_index: int = Field(ge=0)
    seed: int = Field(ge=0, lt=2 ** 64)
    actions: Tuple[Action, ...] = ()
    final_output: str = ""
    completed: bool = True
    subtask_status: Dict[str, SubtaskStatus] = Field(default_factory=dict)
    # failed subtask id -> dependents that could not run in this run
    cascades: Dict[str, Tuple[str, ...]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_indices(self) -> "Trajectory":
        for position, action in enumerate(self.actions):
            if action.step_index != position:
                raise ValueError(f"action {position} has step_index {action.step_index}")
        if self.completed and not self.actions:
            raise ValueError("a completed run has at least one action")
        return self

    @property
    def sim_time_ms(self) -> int:
        return sum(action.sim_time_ms for action in self.actions)

    def mean_confidence(self) -> float:
        if not self.actions:
            return 0.0
        return sum(action.confidence for action in self.actions) / len(self.actions)


# ---------------------------------------------------------------------------
# Tools
# ---------------------------------------------------------------------------

class FaultProfile(BaseModel):
    model_config = FROZEN

    timeout: float = Field(default=0.0, ge=0.0, le=1.0)
    refusal: float = Field(default=0.0, ge=0.0, le=1.0)
    malformed: float = Field(default=0.0, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_total(self) -> "FaultProfile":
        if self.timeout + self.refusal + self.malformed > 1.0 + WEIGHT_TOLERANCE:
            raise ValueError("fault probabilities sum above 1")
        return self


class ToolSpec(BaseModel):
    """A simulated tool. `behavior` maps argument regexes to response templates."""

    model_config = FROZEN

    name: str
    capabilities: Tuple[str, ...]
    resource_cost: float = Field(gt=0.0)
    behavior: Dict[str, str] = Field(default_factory=dict)
    fault_profile: FaultProfile = Field(default_factory=FaultProfile)
    eval_score: float = Field(default=1.0, ge=0.0, le=1.0)
    latency_ms: int = Field(default=100, ge=0)
    timeout_ms: int = Field(default=1000, ge=0)

    @field_validator("capabilities", mode="before")
    @classmethod
    def _canonical_capabilities(cls, value: Any) -> Tuple[str, ...]:
        return tuple(sorted(set(value or ())))


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------

class ReliabilityWeights(BaseModel):
    model_config = FROZEN

    w1: float = Field(ge=0.0)
    w2: float = Field(ge=0.0)
    w3: float = Field(ge=0.0)

    @model_validator(mode="after")
    def _check_sum(self) -> "ReliabilityWeights":
        if not weights_sum_to_one(self):
            raise ValueError(f"weights must sum to 1, got {self.w1 + self.w2 + self.w3}")
        return self

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)


def weights_sum_to_one(weights: ReliabilityWeights) -> bool:
    values = (weights.w1, weights.w2, weights.w3)
    return min(values) >= 0.0 and abs(sum(values) - 1.0) <= WEIGHT_TOLERANCE


class ReliabilityScore(BaseModel):
    """R with its stored components. `step` is set for per-step evaluation."""

    model_config = FROZEN

    C: float = Field(ge=0.0, le=1.0)
    S: float = Field(ge=0.0, le=1.0)
    E: float = Field(ge=0.0, le=1.0)
    R: float = Field(ge=0.0, le=1.0)
    theta: float = Field(gt=0.0, lt=1.0)
    w1: float
    w2: float
    w3: float
    c_available: bool = True
    step: Optional[int] = None

    @model_validator(mode="after")
    def _check_recomputable(self) -> "ReliabilityScore":
        expected = self.w1 * self.C + self.w2 * self.S + self.w3 * self.E
        if abs(expected - self.R) > SCORE_TOLERANCE:
            raise ValueError(f"R={self.R} does not match weighted components {expected}")
        return self


# ---------------------------------------------------------------------------
# Failures and healing
# ---------------------------------------------------------------------------

class FailureEvent(BaseModel):
    model_config = FROZEN

    failure_type: FailureType
    source: FailureSource
    step_index: Optional[int] = None
    evidence: str = ""
    run_index: Optional[int] = None
    run_indices: Tuple[int, ...] = ()
    tool: Optional[str] = None
    error_kind: Optional[ToolErrorKind] = None
    subtask_id: Optional[str] = None
    claims: Tuple[str, ...] = ()
    # ground truth, filled only by the harness after the fact
    injected: Optional[FailureType] = None


class HealingAction(BaseModel):
    model_config = FROZEN

    strategy: HealingStrategy
    failure_type: FailureType
    attempt: int = Field(ge=1)
    params: Dict[str, Any] = Field(default_factory=dict)


class FlaggedClaim(BaseModel):
    model_config = FROZEN

    claim: str
    facts: Tuple[str, ...] = ()


class CorrectionBlock(BaseModel):
    """Prompt correction appended after a hallucination."""

    model_config = FROZEN

    objective: str
    flagged: Tuple[FlaggedClaim, ...] = ()
    instruction: str = "Answer only from the facts provided."

    def cited_facts(self) -> List[str]:
        return [fact for item in self.flagged for fact in item.facts]

    def render(self) -> str:
        lines = [f"Objective: {self.objective}"]
        for item in self.flagged:
            lines.append(f"Claim: {item.claim} unsupported - verify against:")
            lines.extend(f"  - {fact}" for fact in item.facts)
        lines.append(self.instruction)
        return "\n".join(lines)


class PromptState(BaseModel):
    """Everything the agent is told about a task beyond the plan."""

    model_config = FROZEN

    objective: str
    corrections: Tuple[CorrectionBlock, ...] = ()
    notes: Tuple[str, ...] = ()
    feedback: Tuple[str, ...] = ()

    def with_note(self, note: str) -> "PromptState":
        return self.model_copy(update={"notes": self.notes + (note,)})

    def with_feedback(self, feedback: str) -> "PromptState":
        return self.model_copy(update={"feedback": self.feedback + (feedback,)})

    def render(self) -> str:
        parts = [f"Task: {self.objective}"]
        parts.extend(block.render() for block in self.corrections)
        parts.extend(f"Note: {note}" for note in self.notes)
        parts.extend(f"Feedback: {text}" for text in self.feedback)
        return "\n\n".join(parts)


# ---------------------------------------------------------------------------
# Validation knowledge base
# ---------------------------------------------------------------------------

class KBEntry(BaseModel):
    model_config = FROZEN

    id: str
    family: TaskType
    text: str
    subject: str = ""
    value: str = ""


class ValidationKB(BaseModel):
    """Canonical facts per task family, read-only during a run."""

    model_config = FROZEN

    entries: Dict[str, KBEntry] = Field(default_factory=dict)

    def get(self, entry_id: str) -> Optional[KBEntry]:
        return self.entries.get(entry_id)

    def resolve(self, entry_ids: Tuple[str, ...]) -> List[KBEntry]:
        """Entries for the given ids, in the given order, skipping unknown ids."""
        return [self.entries[key] for key in entry_ids if key in self.entries]

    def for_family(self, family: TaskType) -> List[KBEntry]:
        return [entry for _, entry in sorted(self.entries.items()) if entry.family == family]
