"""
Self-healing strategies
Strategy selection, prompt correction, tool re-selection, re-planning and the
bridge from low-level tool exceptions to agent-readable notes.
"""
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import HealingExhausted, NoAlternativeTool, PlanInfeasible
from src.models import (
    CorrectionBlock,
    FailureEvent,
    FailureType,
    FlaggedClaim,
    HealingAction,
    HealingStrategy,
    PromptState,
    SubtaskStatus,
    TaskSpec,
    ToolSpec,
    ValidationKB,
    dependency_graph,
    execution_order,
)
from src.reliability import jaccard

logger = logging.getLogger(__name__)

DEFAULT_LADDERS: Dict[FailureType, Tuple[HealingStrategy, ...]] = {
    FailureType.HALLUCINATION: (HealingStrategy.PROMPT_CORRECTION, HealingStrategy.REPLAN),
    FailureType.EXECUTION: (HealingStrategy.TOOL_RESELECTION, HealingStrategy.REPLAN),
    FailureType.REASONING_INCONSISTENCY: (HealingStrategy.REPLAN,),
    FailureType.WORKFLOW_PROPAGATION: (HealingStrategy.REPLAN,),
}

EXCEPTION_CATEGORIES = {
    "timeout": "API response delay",
    "unavailable": "tool unavailable",
    "refusal": "tool declined request",
    "malformed": "tool returned invalid data",
}
UNCLASSIFIED = "tool error (unclassified)"

ALTERNATIVE_TOOL = "alternative tool"
LONGER_INTERVAL = "longer retry interval"
REMEDIES = {
    "timeout": (LONGER_INTERVAL, ALTERNATIVE_TOOL),
    "malformed": (LONGER_INTERVAL, ALTERNATIVE_TOOL),
}

MAX_CITED_FACTS = 3
SETTLED = (SubtaskStatus.EXCLUDED, SubtaskStatus.CASCADED)


class HealingPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    strategy_table: Dict[FailureType, Tuple[HealingStrategy, ...]] = Field(
        default_factory=lambda: dict(DEFAULT_LADDERS)
    )
    max_heal_attempts: int = Field(default=3, ge=1)
    base_ms: int = Field(default=100, ge=0)
    factor: float = Field(default=2.0, ge=1.0)
    cap_attempts: int = Field(default=5, ge=0)

    @model_validator(mode="after")
    def _every_type_has_a_strategy(self) -> "HealingPolicy":
        missing = [ftype.value for ftype in FailureType if not self.strategy_table.get(ftype)]
        if missing:
            raise ValueError(f"no healing strategy for {', '.join(missing)}")
        return self


class ToolFailure(BaseModel):
    """A raw tool exception as the runtime sees it."""

    kind: str
    tool: str
    message: str = ""


class StructuredExceptionNote(BaseModel):
    model_config = ConfigDict(frozen=True)

    category: str
    tool: str
    raw_message: str = ""
    remedies: Tuple[str, ...] = ()

    def render(self) -> str:
        text = f"[{self.category}] tool {self.tool}"
        if self.raw_message:
            text += f": {self.raw_message}"
        if self.remedies:
            text += f" (consider: {', '.join(self.remedies)})"
        return text


class Plan(BaseModel):
    """Result of re-planning: the rewritten task and its execution order."""

    model_config = ConfigDict(frozen=True)

    task: TaskSpec
    order: Tuple[str, ...]
    excluded: Tuple[str, ...] = ()
    cascaded: Tuple[str, ...] = ()


def select_strategy(
    ftype: FailureType, history: Sequence[HealingAction], policy: Optional[HealingPolicy] = None
) -> HealingAction:
    """
    Next strategy for a failure type.

    Walks the type's ladder, skipping strategies already spent on this type.
    Replan ends every ladder and may repeat.
    """
    policy = policy or HealingPolicy()
    attempt = len(history) + 1
    if attempt > policy.max_heal_attempts:
        raise HealingExhausted(f"{len(history)} healing attempts used, limit {policy.max_heal_attempts}")

    tried = {action.strategy for action in history if action.failure_type == ftype}
    strategy = HealingStrategy.REPLAN
    for candidate in policy.strategy_table[ftype]:
        if candidate == HealingStrategy.REPLAN or candidate not in tried:
            strategy = candidate
            break
    return HealingAction(strategy=strategy, failure_type=ftype, attempt=attempt)


def _rank_facts(claim: str, pool: Sequence[Tuple[str, str]]) -> List[str]:
    scored = [(jaccard(claim, text), entry_id, text) for entry_id, text in pool]
    scored = [item for item in scored if item[0] > 0]
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [text for _, _, text in scored[:MAX_CITED_FACTS]]


def correct_prompt(
    prompt_state: PromptState,
    evidence: FailureEvent,
    kb: ValidationKB,
    refs: Sequence[str] = (),
) -> PromptState:
    """Append a correction block citing KB facts for each flagged claim."""
    entries = kb.resolve(tuple(refs)) if refs else list(kb.entries.values())
    pool = [(entry.id, entry.text) for entry in entries]
    flagged = tuple(
        FlaggedClaim(claim=claim, facts=tuple(_rank_facts(claim, pool)))
        for claim in evidence.claims
    )
    block = CorrectionBlock(objective=prompt_state.objective, flagged=flagged)
    return prompt_state.model_copy(update={"corrections": prompt_state.corrections + (block,)})


def reselect_tool(
    failed_tool: str,
    registry: Iterable[ToolSpec],
    required_capability: str,
    scores: Optional[Mapping[str, float]] = None,
    exclude: Iterable[str] = (),
) -> ToolSpec:
    """Best other tool with the capability: eval score, then cost, then name."""
    scores = scores or {}
    banned = set(exclude) | {failed_tool}
    candidates = [
        tool for tool in registry
        if required_capability in tool.capabilities and tool.name not in banned
    ]
    if not candidates:
        raise NoAlternativeTool(f"no alternative to {failed_tool} for capability '{required_capability}'")
    candidates.sort(key=lambda tool: (-scores.get(tool.name, tool.eval_score), tool.resource_cost, tool.name))
    chosen = candidates[0]
    logger.debug(f"Re-selected {chosen.name} in place of {failed_tool}")
    return chosen


def replan(task: TaskSpec, failed_subtask_ids: Iterable[str]) -> Plan:
    """
    Exclude failed subtasks and rebuild the executable plan.

    A node whose dependencies are all Excluded or Cascaded is Cascaded.
    Surviving nodes drop those dependencies. Succeeded nodes are untouched.
    """
    statuses = task.statuses()
    for subtask_id in set(failed_subtask_ids) | {k for k, v in statuses.items() if v == SubtaskStatus.FAILED}:
        if subtask_id in statuses and statuses[subtask_id] != SubtaskStatus.SUCCEEDED:
            statuses[subtask_id] = SubtaskStatus.EXCLUDED

    nodes = task.by_id()
    for subtask_id in nx.topological_sort(dependency_graph(task)):
        node = nodes[subtask_id]
        if statuses[subtask_id] != SubtaskStatus.PENDING or not node.deps:
            continue
        if all(statuses.get(dep) in SETTLED for dep in node.deps):
            statuses[subtask_id] = SubtaskStatus.CASCADED

    rewritten = []
    for node in task.subtasks:
        update = {"status": statuses[node.id]}
        if statuses[node.id] == SubtaskStatus.PENDING:
            update["deps"] = tuple(dep for dep in node.deps if statuses.get(dep) not in SETTLED)
        rewritten.append(node.model_copy(update=update))
    new_task = task.model_copy(update={"subtasks": tuple(rewritten)})

    excluded = tuple(sorted(k for k, v in statuses.items() if v == SubtaskStatus.EXCLUDED))
    cascaded = tuple(sorted(k for k, v in statuses.items() if v == SubtaskStatus.CASCADED))
    if all(statuses[terminal] in SETTLED for terminal in task.terminal_ids()):
        raise PlanInfeasible(f"task {task.id}: every terminal subtask is excluded or cascaded")

    order = tuple(execution_order(new_task))
    logger.debug(f"Replanned {task.id}: order={list(order)} excluded={list(excluded)} cascaded={list(cascaded)}")
    return Plan(task=new_task, order=order, excluded=excluded, cascaded=cascaded)


def exception_to_context(
    err: ToolFailure, attempt: int, policy: Optional[HealingPolicy] = None
) -> Tuple[StructuredExceptionNote, Optional[int]]:
    """
    Structured note for a failed call plus the wait before the next retry.

    The interval is base_ms * factor^(attempt - 1); None once attempt passes
    cap_attempts, meaning stop retrying and escalate.
    """
    policy = policy or HealingPolicy()
    note = StructuredExceptionNote(
        category=EXCEPTION_CATEGORIES.get(err.kind, UNCLASSIFIED),
        tool=err.tool,
        raw_message=err.message,
        remedies=REMEDIES.get(err.kind, (ALTERNATIVE_TOOL,)),
    )
    if attempt > policy.cap_attempts:
        return note, None
    return note, int(round(policy.base_ms * policy.factor ** (attempt - 1)))
