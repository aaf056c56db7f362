"""
Closed-loop orchestration engine
Execution, evaluation, detection, healing and re-execution for one task,
plus the comparison policies (standard agent, retry, self-refine, vote).
"""
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.config import ExperimentConfig
from src.detection import (
    ALL_DETECTORS,
    CONSISTENCY,
    PATTERNS,
    THRESHOLD,
    classification_trajectory,
    classify_failure,
    run_detectors,
)
from src.errors import AegisError, ConfigError, HealingExhausted, NoAlternativeTool, PlanInfeasible, RegistryError
from src.healing import (
    HealingPolicy,
    ToolFailure,
    correct_prompt,
    exception_to_context,
    replan,
    reselect_tool,
    select_strategy,
)
from src.models import (
    Action,
    ActionKind,
    ActionStatus,
    FailureEvent,
    FailureType,
    HealingAction,
    HealingStrategy,
    Outcome,
    PromptState,
    ReliabilityScore,
    SubtaskStatus,
    TaskSpec,
    TaskType,
    ToolErrorKind,
    Trajectory,
    dependency_graph,
    topo_ready,
)
from src.reliability import evaluate_bundle, evaluate_prefixes, normalize_tokens, outputs_match, unsupported_claims
from src.world import (
    REASON_TIME_MS,
    RESPOND_TIME_MS,
    AgentContext,
    FaultSchedule,
    InjectionPlan,
    ToolOutcome,
    World,
    derive_seed,
    invoke_tool,
    rng_stream,
)

logger = logging.getLogger(__name__)

CRITIQUE_TEMPLATE = (
    "Previous answer: {output} "
    "Critique: check every claim for accuracy and completeness, then answer again."
)


class PolicyKind(str, Enum):
    PROPOSED = "proposed"
    STANDARD_AGENT = "b1"
    RETRY_BASED = "b2"
    SELF_REFINE = "b3"
    CONSISTENCY_VOTE = "b4"


class ExecutionPolicy(BaseModel):
    """One way of executing a task. Ablations are Proposed with parts switched off."""

    model_config = ConfigDict(frozen=True)

    name: str
    kind: PolicyKind
    k: int = 1
    max_retries: int = 0
    rounds: int = 0
    detectors: FrozenSet[str] = ALL_DETECTORS
    healing: bool = True


def parse_policy(name: str, cfg: ExperimentConfig) -> ExecutionPolicy:
    """Policy for a CLI/config name such as 'proposed', 'b2' or 'proposed-no-threshold'."""
    if name == "proposed":
        return ExecutionPolicy(name=name, kind=PolicyKind.PROPOSED, k=cfg.k)
    if name == "b1":
        return ExecutionPolicy(name=name, kind=PolicyKind.STANDARD_AGENT)
    if name == "b2":
        return ExecutionPolicy(name=name, kind=PolicyKind.RETRY_BASED, max_retries=cfg.baselines.max_retries)
    if name == "b3":
        return ExecutionPolicy(name=name, kind=PolicyKind.SELF_REFINE, rounds=cfg.baselines.rounds)
    if name == "b4":
        return ExecutionPolicy(name=name, kind=PolicyKind.CONSISTENCY_VOTE, k=cfg.baselines.vote_k)

    ablations = {
        "proposed-no-patterns": {"detectors": ALL_DETECTORS - {PATTERNS}},
        "proposed-no-consistency": {"detectors": ALL_DETECTORS - {CONSISTENCY}},
        "proposed-no-threshold": {"detectors": ALL_DETECTORS - {THRESHOLD}},
        "proposed-no-healing": {"healing": False},
    }
    if name in ablations:
        return ExecutionPolicy(name=name, kind=PolicyKind.PROPOSED, k=cfg.k, **ablations[name])
    raise ConfigError(f"unknown policy '{name}'")


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

class RunEvent(BaseModel):
    record_id: str
    kind: str
    payload: Dict[str, Any] = Field(default_factory=dict)
    sim_time_ms: int = 0


SUMMARY_EXCLUDE = {"trajectories", "log"}


class RunRecord(BaseModel):
    """Append-only log of one task execution under one policy."""

    record_id: str
    task_id: str
    task_type: TaskType
    repeat_index: int
    policy: str
    seed: int
    injection: Optional[InjectionPlan] = None
    trajectories: List[Trajectory] = Field(default_factory=list)
    scores: List[ReliabilityScore] = Field(default_factory=list)
    events: List[FailureEvent] = Field(default_factory=list)
    classifications: List[FailureType] = Field(default_factory=list)
    healing_actions: List[HealingAction] = Field(default_factory=list)
    executions: int = 0
    max_tool_attempts: int = 0
    outcome: Outcome = Outcome.FAILED
    final_output: str = ""
    stop_reason: str = ""
    sim_time_ms: int = 0
    wall_ms: float = 0.0
    log: List[RunEvent] = Field(default_factory=list)

    @classmethod
    def start(cls, task: TaskSpec, policy: ExecutionPolicy, seed: int,
              injection: Optional[InjectionPlan], repeat_index: int) -> "RunRecord":
        record = cls(
            record_id=f"{task.id}/r{repeat_index}/{policy.name}",
            task_id=task.id,
            task_type=task.task_type,
            repeat_index=repeat_index,
            policy=policy.name,
            seed=seed,
            injection=injection,
        )
        record._append("start", {"policy": policy.name, "seed": seed})
        return record

    def _append(self, kind: str, payload: Dict[str, Any]) -> None:
        self.log.append(RunEvent(record_id=self.record_id, kind=kind, payload=payload, sim_time_ms=self.sim_time_ms))

    def add_bundle(self, iteration: int, bundle: Sequence[Trajectory]) -> None:
        for traj in bundle:
            self.trajectories.append(traj)
            self.executions += 1
            self.sim_time_ms += traj.sim_time_ms
            attempts = [action.attempt for action in traj.actions]
            self.max_tool_attempts = max([self.max_tool_attempts] + attempts)
            self._append("trajectory", {"iteration": iteration, "trajectory": traj.model_dump(mode="json")})

    def add_scores(self, scores: Sequence[ReliabilityScore]) -> None:
        self.scores.extend(scores)
        for score in scores:
            self._append("score", score.model_dump(mode="json"))

    def add_events(self, events: Sequence[FailureEvent]) -> None:
        self.events.extend(events)
        for event in events:
            self._append("failure", event.model_dump(mode="json"))

    def add_classification(self, ftype: FailureType) -> None:
        self.classifications.append(ftype)
        self._append("classification", {"failure_type": ftype.value})

    def add_healing(self, action: HealingAction) -> None:
        self.healing_actions.append(action)
        self._append("healing", action.model_dump(mode="json"))

    def finish(self, outcome: Outcome, final_output: str, stop_reason: str) -> None:
        self.outcome = outcome
        self.final_output = final_output
        self.stop_reason = stop_reason
        self._append("outcome", {"outcome": outcome.value, "final_output": final_output, "stop_reason": stop_reason})

    @property
    def detected(self) -> bool:
        return bool(self.events)

    @property
    def first_classification(self) -> Optional[FailureType]:
        return self.classifications[0] if self.classifications else None

    def summary(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude=SUMMARY_EXCLUDE)

    def jsonl_lines(self) -> List[str]:
        """Event lines followed by one summary line."""
        lines = [dump_json(event.model_dump(mode="json")) for event in self.log]
        summary = RunEvent(record_id=self.record_id, kind="summary", payload=self.summary(), sim_time_ms=self.sim_time_ms)
        lines.append(dump_json(summary.model_dump(mode="json")))
        return lines


def dump_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Per-task state and the single-run runtime
# ---------------------------------------------------------------------------

@dataclass
class TaskState:
    """Healing state of one task loop; never shared between tasks."""

    plan: TaskSpec
    prompt: PromptState
    bindings: Dict[str, str]
    tool_scores: Dict[str, float]
    failed_tools: Set[str] = field(default_factory=set)
    plan_version: int = 0
    history: List[HealingAction] = field(default_factory=list)

    @classmethod
    def initial(cls, task: TaskSpec, world: World) -> "TaskState":
        return cls(
            plan=task,
            prompt=PromptState(objective=task.objective),
            bindings=world.initial_bindings(),
            tool_scores={name: tool.eval_score for name, tool in world.registry.items()},
        )

    def record_calls(self, calls: Sequence[Tuple[str, bool]], alpha: float) -> None:
        for tool, ok in calls:
            previous = self.tool_scores.get(tool, 1.0)
            self.tool_scores[tool] = alpha * (1.0 if ok else 0.0) + (1.0 - alpha) * previous

    def absorb_consensus(self, bundle: Sequence[Trajectory]) -> None:
        """Subtasks that succeeded in every run are not executed again."""
        statuses = self.plan.statuses()
        for subtask_id, status in statuses.items():
            if status != SubtaskStatus.PENDING:
                continue
            if all(traj.subtask_status.get(subtask_id) == SubtaskStatus.SUCCEEDED for traj in bundle):
                statuses[subtask_id] = SubtaskStatus.SUCCEEDED
        self.plan = self.plan.with_statuses(statuses)


@dataclass
class RunSettings:
    max_steps: int = 32
    # None disables in-call retries
    retry_policy: Optional[HealingPolicy] = None


def execution_seed(seed: int, attempt: int) -> int:
    """Seed of one whole-task execution attempt, shared by every policy."""
    return derive_seed(seed, "execution", attempt)


def _cut_off(plan: TaskSpec, statuses: Dict[str, SubtaskStatus], failed: str) -> List[str]:
    graph = dependency_graph(plan)
    victims = sorted(
        node for node in nx.descendants(graph, failed)
        if statuses.get(node) == SubtaskStatus.PENDING
    )
    for node in victims:
        statuses[node] = SubtaskStatus.CASCADED
    return victims


def _call_tool(
    world: World,
    proposed: Action,
    rng: np.random.Generator,
    faults: FaultSchedule,
    settings: RunSettings,
    start_index: int,
    prompt: PromptState,
) -> Tuple[List[Action], bool, PromptState]:
    """One tool call with the runtime's retry-with-backoff loop."""
    recorded: List[Action] = []
    attempt, backoff = 1, 0
    while True:
        try:
            outcome = invoke_tool(world.tool(proposed.tool), proposed.args, rng, faults)
        except RegistryError as e:
            outcome = ToolOutcome(
                status=ActionStatus.TOOL_ERROR, error_kind=ToolErrorKind.UNAVAILABLE,
                message=str(e), sim_time_ms=0,
            )
        recorded.append(proposed.model_copy(update={
            "step_index": start_index + len(recorded),
            "output": outcome.output,
            "status": outcome.status,
            "error_kind": outcome.error_kind,
            "sim_time_ms": outcome.sim_time_ms + backoff,
            "attempt": attempt,
            "backoff_ms": backoff,
        }))
        ok = outcome.status == ActionStatus.OK
        if ok or settings.retry_policy is None:
            return recorded, ok, prompt

        failure = ToolFailure(kind=outcome.error_kind.value, tool=proposed.tool, message=outcome.message)
        note, interval = exception_to_context(failure, attempt, settings.retry_policy)
        prompt = prompt.with_note(note.render())
        if interval is None:
            return recorded, False, prompt
        backoff = interval
        attempt += 1


def run_trajectory(
    world: World,
    state: TaskState,
    faults: FaultSchedule,
    run_index: int,
    run_seed: int,
    settings: RunSettings,
) -> Trajectory:
    """Execute the current plan once, from the agent's first step to Respond."""
    agent = world.agent_for_run(faults, state.plan, run_index)
    agent_rng = rng_stream(run_seed, "agent")
    tool_rng = rng_stream(run_seed, "tool")
    time_rng = rng_stream(run_seed, "time")

    statuses = dict(state.plan.statuses())
    prompt = state.prompt
    actions: List[Action] = []
    cascades: Dict[str, Tuple[str, ...]] = {}
    blocked: List[str] = []
    final_output, completed = "", False

    for _ in range(settings.max_steps):
        view = state.plan.with_statuses(statuses)
        context = AgentContext(
            task=view,
            prompt=prompt,
            step_index=len(actions),
            run_index=run_index,
            step_budget=settings.max_steps,
            ready=tuple(topo_ready(view)),
            pending=tuple(sorted(k for k, v in statuses.items() if v == SubtaskStatus.PENDING)),
            blocked=tuple(sorted(blocked)),
            statuses=dict(statuses),
            bindings=dict(state.bindings),
            plan_version=state.plan_version,
        )
        proposed = agent.next_action(context, agent_rng)
        subtask = proposed.subtask_id if statuses.get(proposed.subtask_id) == SubtaskStatus.PENDING else None

        if proposed.kind == ActionKind.TOOL_CALL:
            recorded, ok, prompt = _call_tool(world, proposed, tool_rng, faults, settings, len(actions), prompt)
            actions.extend(recorded)
            succeeded = ok
        elif proposed.kind == ActionKind.REASON:
            elapsed = int(time_rng.integers(*REASON_TIME_MS))
            actions.append(proposed.model_copy(update={"step_index": len(actions), "sim_time_ms": elapsed}))
            succeeded = not proposed.subtask_failed
        else:
            actions.append(proposed.model_copy(update={"step_index": len(actions), "sim_time_ms": RESPOND_TIME_MS}))
            final_output, completed = proposed.output, True
            break

        if subtask is not None:
            if succeeded:
                statuses[subtask] = SubtaskStatus.SUCCEEDED
            else:
                statuses[subtask] = SubtaskStatus.FAILED
                blocked.append(subtask)
                victims = _cut_off(state.plan, statuses, subtask)
                blocked.extend(victims)
                cascades[subtask] = tuple(victims)
    else:
        logger.debug(f"Run {run_index} of {state.plan.id} exhausted its {settings.max_steps}-step budget")

    return Trajectory(
        run_index=run_index,
        seed=run_seed,
        actions=tuple(actions),
        final_output=final_output,
        completed=completed,
        subtask_status=statuses,
        cascades=cascades,
    )


def run_k_samples(
    task: TaskSpec,
    world: World,
    k: int,
    seed: int,
    state: Optional[TaskState] = None,
    faults: Optional[FaultSchedule] = None,
    settings: Optional[RunSettings] = None,
) -> List[Trajectory]:
    """K independent runs; run i uses a seed derived from (seed, i)."""
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    state = state or TaskState.initial(task, world)
    faults = faults or FaultSchedule()
    settings = settings or RunSettings()
    return [
        run_trajectory(world, state, faults, run_index, derive_seed(seed, "run", run_index), settings)
        for run_index in range(k)
    ]


def tool_calls(bundle: Sequence[Trajectory]) -> List[Tuple[str, bool]]:
    return [
        (action.tool, action.status == ActionStatus.OK)
        for traj in sorted(bundle, key=lambda t: t.run_index)
        for action in traj.actions
        if action.kind == ActionKind.TOOL_CALL
    ]


def select_final(bundle: Sequence[Trajectory]) -> str:
    """Strict-majority answer, else the most confident run, then lexicographic."""
    groups = Counter(tuple(normalize_tokens(traj.final_output)) for traj in bundle)
    tokens, count = groups.most_common(1)[0]
    if 2 * count > len(bundle):
        for traj in sorted(bundle, key=lambda t: t.run_index):
            if tuple(normalize_tokens(traj.final_output)) == tokens:
                return traj.final_output
    best = min(bundle, key=lambda traj: (-traj.mean_confidence(), traj.final_output))
    return best.final_output


# ---------------------------------------------------------------------------
# Proposed closed loop
# ---------------------------------------------------------------------------

def _score(bundle: Sequence[Trajectory], task: TaskSpec, world: World, cfg: ExperimentConfig,
           use_consistency: bool) -> List[ReliabilityScore]:
    weights = cfg.weights_for(task.task_type)
    if cfg.scoring.evaluation == "step":
        return evaluate_prefixes(bundle, task, world.kb, weights, cfg.theta, cfg.scoring, use_consistency)
    return [evaluate_bundle(bundle, task, world.kb, weights, cfg.theta, cfg.scoring, use_consistency)]


def _failed_tool(events: Sequence[FailureEvent], traj: Trajectory) -> Optional[Tuple[str, Optional[str]]]:
    for event in events:
        if event.tool is not None and event.error_kind is not None:
            return event.tool, event.subtask_id
    for action in reversed(traj.actions):
        if action.status == ActionStatus.TOOL_ERROR:
            return action.tool, action.subtask_id
    return None


def _replan(action: HealingAction, state: TaskState, bundle: Sequence[Trajectory], **extra) -> HealingAction:
    failed = sorted({
        subtask_id
        for traj in bundle
        for subtask_id, status in traj.subtask_status.items()
        if status == SubtaskStatus.FAILED
    })
    params = {**action.params, **extra, "failed_subtasks": failed}
    action = action.model_copy(update={"strategy": HealingStrategy.REPLAN, "params": params})
    plan = replan(state.plan, failed)
    state.plan = plan.task
    state.plan_version += 1
    return action.model_copy(update={"params": {**params, "order": list(plan.order), "excluded": list(plan.excluded)}})


def apply_strategy(
    action: HealingAction,
    state: TaskState,
    events: Sequence[FailureEvent],
    traj: Trajectory,
    bundle: Sequence[Trajectory],
    world: World,
    cfg: ExperimentConfig,
) -> HealingAction:
    """Mutate the task state per the strategy; returns the action with its parameters."""
    if action.strategy == HealingStrategy.PROMPT_CORRECTION:
        claims = unsupported_claims(traj.final_output, world.kb, state.plan, cfg.scoring.jaccard_threshold)
        evidence = events[0].model_copy(update={"claims": tuple(claims)})
        state.prompt = correct_prompt(state.prompt, evidence, world.kb, state.plan.validation_refs)
        return action.model_copy(update={"params": {"claims": claims}})

    if action.strategy == HealingStrategy.TOOL_RESELECTION:
        found = _failed_tool(events, traj)
        if found is None:
            return _replan(action, state, bundle, escalated_from="tool_reselection", reason="no failing tool")
        failed, subtask_id = found
        node = state.plan.by_id().get(subtask_id) if subtask_id else None
        capability = node.required_capability if node is not None else next(
            (cap for cap, tool in sorted(state.bindings.items()) if tool == failed), ""
        )
        try:
            replacement = reselect_tool(failed, world.registry.values(), capability,
                                        state.tool_scores, state.failed_tools)
        except NoAlternativeTool as e:
            return _replan(action, state, bundle, escalated_from="tool_reselection", reason=str(e))
        state.failed_tools.add(failed)
        for cap, tool in list(state.bindings.items()):
            if tool == failed and cap in replacement.capabilities:
                state.bindings[cap] = replacement.name
        state.bindings[capability] = replacement.name
        return action.model_copy(update={"params": {
            "failed_tool": failed, "capability": capability, "replacement": replacement.name,
        }})

    return _replan(action, state, bundle)


def _run_proposed(record: RunRecord, task: TaskSpec, policy: ExecutionPolicy, world: World,
                  cfg: ExperimentConfig, seed: int, injection: Optional[InjectionPlan]) -> None:
    state = TaskState.initial(task, world)
    settings = RunSettings(max_steps=cfg.max_steps, retry_policy=cfg.healing)
    use_consistency = cfg.consistency and policy.k >= 2
    iteration = 0

    while True:
        faults = world.faults_for(injection, iteration)
        bundle = run_k_samples(task, world, policy.k, execution_seed(seed, iteration), state, faults, settings)
        record.add_bundle(iteration, bundle)
        state.record_calls(tool_calls(bundle), cfg.eval_score_alpha)
        state.absorb_consensus(bundle)

        scores = _score(bundle, state.plan, world, cfg, use_consistency)
        record.add_scores(scores)
        events = run_detectors(bundle, scores, cfg.detection, policy.detectors)
        record.add_events(events)

        if not events:
            final = select_final(bundle)
            outcome = Outcome.SUCCEEDED if outputs_match(final, task.expected_output) else Outcome.FAILED
            record.finish(outcome, final, "clean")
            return

        traj = classification_trajectory(events, bundle)
        ftype = classify_failure(events, traj, bundle, state.plan, world.kb, cfg.scoring.jaccard_threshold)
        record.add_classification(ftype)
        logger.debug(f"{record.record_id} iteration {iteration}: {len(events)} event(s), classified {ftype.value}")

        if not policy.healing:
            final = select_final(bundle)
            outcome = Outcome.SUCCEEDED if outputs_match(final, task.expected_output) else Outcome.FAILED
            record.finish(outcome, final, "detected")
            return

        try:
            action = select_strategy(ftype, state.history, cfg.healing)
        except HealingExhausted as e:
            logger.debug(f"{record.record_id}: {e}")
            record.finish(Outcome.FAILED, "", "healing_exhausted")
            return
        try:
            action = apply_strategy(action, state, events, traj, bundle, world, cfg)
        except PlanInfeasible as e:
            record.add_healing(action.model_copy(update={"strategy": HealingStrategy.REPLAN, "params": {"error": str(e)}}))
            record.finish(Outcome.FAILED, "", "plan_infeasible")
            return
        record.add_healing(action)
        state.history.append(action)
        iteration += 1


# ---------------------------------------------------------------------------
# Comparison policies
# ---------------------------------------------------------------------------

def _incomplete(traj: Trajectory) -> bool:
    if not traj.completed:
        return True
    return any(status not in (SubtaskStatus.SUCCEEDED, SubtaskStatus.EXCLUDED)
               for status in traj.subtask_status.values())


def _has_tool_error(traj: Trajectory) -> bool:
    return any(action.status == ActionStatus.TOOL_ERROR for action in traj.actions)


def run_baseline(task: TaskSpec, policy: ExecutionPolicy, world: World, seed: int,
                 cfg: Optional[ExperimentConfig] = None, injection: Optional[InjectionPlan] = None,
                 repeat_index: int = 0) -> RunRecord:
    """
    Standard agent: one run. Retry: whole-task re-runs on a tool error or an
    incomplete run. Self-refine: feed back the answer with a critique for
    each round. Vote: K runs, majority answer.
    """
    if policy.kind == PolicyKind.PROPOSED:
        raise ConfigError("run_baseline does not run the proposed policy")
    cfg = cfg or ExperimentConfig()
    record = RunRecord.start(task, policy, seed, injection, repeat_index)
    settings = RunSettings(max_steps=cfg.max_steps)
    state = TaskState.initial(task, world)

    def single(attempt: int) -> Trajectory:
        faults = world.faults_for(injection, attempt)
        bundle = run_k_samples(task, world, 1, execution_seed(seed, attempt), state, faults, settings)
        record.add_bundle(attempt, bundle)
        return bundle[0]

    if policy.kind == PolicyKind.STANDARD_AGENT:
        final = single(0).final_output
    elif policy.kind == PolicyKind.RETRY_BASED:
        for attempt in range(policy.max_retries + 1):
            traj = single(attempt)
            if not (_has_tool_error(traj) or _incomplete(traj)):
                break
        final = traj.final_output
    elif policy.kind == PolicyKind.SELF_REFINE:
        for round_index in range(policy.rounds + 1):
            traj = single(round_index)
            state.prompt = state.prompt.with_feedback(CRITIQUE_TEMPLATE.format(output=traj.final_output))
        final = traj.final_output
    else:
        faults = world.faults_for(injection, 0)
        bundle = run_k_samples(task, world, policy.k, execution_seed(seed, 0), state, faults, settings)
        record.add_bundle(0, bundle)
        final = select_final(bundle)

    outcome = Outcome.SUCCEEDED if outputs_match(final, task.expected_output) else Outcome.FAILED
    record.finish(outcome, final, "completed")
    return record


def execute_task(task: TaskSpec, policy: ExecutionPolicy, world: World, cfg: ExperimentConfig, seed: int,
                 injection: Optional[InjectionPlan] = None, repeat_index: int = 0) -> RunRecord:
    """Run one task under one policy. Failures end up in the record, never raised."""
    started = time.perf_counter()
    if policy.kind != PolicyKind.PROPOSED:
        try:
            record = run_baseline(task, policy, world, seed, cfg, injection, repeat_index)
        except AegisError as e:
            logger.error(f"{task.id}/{policy.name}: {e}")
            record = RunRecord.start(task, policy, seed, injection, repeat_index)
            record.finish(Outcome.FAILED, "", f"error: {e}")
    else:
        record = RunRecord.start(task, policy, seed, injection, repeat_index)
        try:
            _run_proposed(record, task, policy, world, cfg, seed, injection)
        except AegisError as e:
            logger.error(f"{record.record_id}: {e}")
            record.finish(Outcome.FAILED, "", f"error: {e}")
    record.wall_ms = (time.perf_counter() - started) * 1000.0
    return record
