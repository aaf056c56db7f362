"""
Simulated agent world
Seeded task corpus, tool sandbox, validation knowledge base, the scripted
agent backend and the F1-F4 fault injector.

Everything here is a pure function of the seed: random streams are keyed by
(seed, task id, repeat, purpose) so adding tasks never shifts another
task's draws.
"""
import hashlib
import json
import logging
import re
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.config import ExperimentConfig
from src.errors import ConfigError, PlanInfeasible, RegistryError
from src.healing import replan
from src.models import (
    Action,
    ActionKind,
    ActionStatus,
    FailureType,
    FaultProfile,
    KBEntry,
    PromptState,
    SubtaskNode,
    SubtaskStatus,
    TaskSpec,
    TaskType,
    ToolErrorKind,
    ToolSpec,
    ValidationKB,
    validate_task,
)

logger = logging.getLogger(__name__)

CLEAN_CONFIDENCE = (0.8, 1.0)
CONFIDENCE_DECAY = 0.7
HALLUCINATION_SPAN = 3
LOOP_ARGS = "re-examine premise"
HALLUCINATION_ARGS = "elaborate on findings"
REASON_TIME_MS = (40, 60)
RESPOND_TIME_MS = 20
REFUSAL_TIME_MS = 30
INJECTED_ERROR_KINDS = (ToolErrorKind.TIMEOUT, ToolErrorKind.REFUSAL, ToolErrorKind.MALFORMED)

# Words that never occur in a family fact, used for fabricated claims.
NONCE_WORDS = [
    "zephyr", "quartz", "lumen", "orbit", "cobalt", "saffron", "tundra", "vortex",
    "marble", "ember", "glacier", "nimbus", "prism", "sable", "thistle", "umber",
    "velvet", "willow", "yonder", "zenith", "anvil", "bramble", "cinder", "dune",
    "fable", "garnet", "harbor", "ivory", "jasper", "kestrel", "lagoon", "meadow",
    "nectar", "onyx", "pewter", "quill", "russet", "spindle", "tinder", "vellum",
]

FAMILIES: Dict[TaskType, Dict] = {
    TaskType.MULTI_STEP_REASONING: {
        "prefix": "msr",
        "subject": "Station",
        "attributes": [
            ("altitude", "meters"),
            ("rainfall", "millimeters"),
            ("wind speed", "knots"),
            ("temperature", "kelvin"),
        ],
        "subtasks": [
            ("s1", "retrieve source records", ()),
            ("s2", "derive primary estimate", ("s1",)),
            ("s3", "derive cross-check estimate", ("s1",)),
            ("s4", "synthesize conclusion", ("s2", "s3")),
        ],
        "capabilities": {"s1": "search"},
    },
    TaskType.API_ORCHESTRATION: {
        "prefix": "api",
        "subject": "Order",
        "attributes": [
            ("total", "credits"),
            ("weight", "kilograms"),
            ("quantity", "units"),
            ("discount", "percent"),
        ],
        "subtasks": [
            ("s1", "fetch order records", ()),
            ("s2", "enrich with pricing data", ("s1",)),
            ("s3", "enrich with ledger data", ("s1",)),
            ("s4", "submit reconciliation", ("s2", "s3")),
        ],
        "capabilities": {"s1": "fetch", "s2": "enrich", "s3": "enrich", "s4": "submit"},
    },
    TaskType.DOCUMENT_PROCESSING: {
        "prefix": "doc",
        "subject": "Contract",
        "attributes": [
            ("penalty", "percent"),
            ("term", "months"),
            ("deposit", "euros"),
            ("notice period", "days"),
        ],
        "subtasks": [
            ("s1", "parse source document", ()),
            ("s2", "extract clauses", ("s1",)),
            ("s3", "extract tables", ("s1",)),
            ("s4", "validate summary", ("s2", "s3")),
        ],
        "capabilities": {"s1": "parse", "s3": "ocr", "s4": "validate"},
    },
}

# name, capabilities, resource cost, base eval score, base latency, behavior
TOOL_CATALOG = [
    ("web_search", ("search",), 2.0, 0.92, 180, {r"retrieve": "found source records: {args}"}),
    ("kb_search", ("search",), 1.0, 0.85, 120, {r"retrieve": "indexed records: {args}"}),
    ("orders_api", ("fetch",), 1.5, 0.93, 150, {r"fetch": "orders payload for {args}"}),
    ("orders_replica", ("fetch",), 1.0, 0.86, 220, {r"fetch": "replica payload for {args}"}),
    ("pricing_api", ("enrich",), 2.0, 0.91, 160, {r"pricing": "price table", r"ledger": "ledger rows"}),
    ("ledger_api", ("enrich",), 1.2, 0.85, 200, {r"pricing": "cached prices", r"ledger": "ledger extract"}),
    ("recon_gateway", ("submit",), 1.0, 0.92, 140, {r"submit": "reconciliation accepted"}),
    ("recon_batch", ("submit",), 1.5, 0.84, 300, {r"submit": "batch queued"}),
    ("pdf_parser", ("parse",), 1.0, 0.94, 110, {r"parse": "parsed text blocks"}),
    ("doc_ai", ("parse", "ocr"), 2.5, 0.88, 260, {r"parse": "layout tree", r"tables": "table grid"}),
    ("vision_ocr", ("ocr",), 2.0, 0.93, 240, {r"tables": "recognized cells"}),
    ("tesseract_ocr", ("ocr",), 1.0, 0.84, 190, {r"tables": "ocr cells"}),
    ("schema_validator", ("validate",), 1.0, 0.95, 90, {r"validate": "summary valid"}),
    ("rule_engine", ("validate",), 1.5, 0.83, 170, {r"validate": "rules satisfied"}),
]


# ---------------------------------------------------------------------------
# Seeded streams
# ---------------------------------------------------------------------------

def stable_hash(value: str) -> int:
    return int(hashlib.md5(value.encode('utf-8')).hexdigest()[:12], 16)


def derive_seed(seed: int, *parts) -> int:
    """64-bit seed derived from a parent seed and a key."""
    key = ":".join([str(seed)] + [str(part) for part in parts])
    return int(hashlib.md5(key.encode('utf-8')).hexdigest()[:16], 16)


def rng_stream(seed: int, *parts) -> np.random.Generator:
    entropy = [seed] + [stable_hash(str(part)) for part in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------

class Corpus(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tasks: Tuple[TaskSpec, ...]
    kb: ValidationKB

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def _entity_code(rng: np.random.Generator) -> str:
    letters = "ABCDEFGHJKLMNPQRSTUVWXYZ"
    first, second = rng.choice(list(letters), size=2)
    return f"{first}{second}-{int(rng.integers(10, 1000))}"


def _make_task(task_type: TaskType, index: int, seed: int) -> Tuple[TaskSpec, List[KBEntry]]:
    family = FAMILIES[task_type]
    rng = rng_stream(seed, "corpus", task_type.value, index)
    task_id = f"{family['prefix']}-{index:03d}"

    subjects: List[str] = []
    while len(subjects) < 2:
        subject = f"{family['subject']} {_entity_code(rng)}"
        if subject not in subjects:
            subjects.append(subject)
    values = [int(v) for v in rng.choice(np.arange(10, 5000), size=2, replace=False)]
    attributes = [family["attributes"][int(i)] for i in rng.integers(0, len(family["attributes"]), size=2)]

    entries = []
    for j, (subject, value, (attribute, unit)) in enumerate(zip(subjects, values, attributes)):
        entries.append(KBEntry(
            id=f"{task_id}-f{j}",
            family=task_type,
            text=f"{subject} {attribute} is {value} {unit}.",
            subject=subject,
            value=str(value),
        ))

    # the two middle branches swap order on a coin flip
    middle = [2, 3] if rng.random() < 0.5 else [3, 2]
    priorities = {"s1": 1, "s2": middle[0], "s3": middle[1], "s4": 4}
    subtasks = tuple(
        SubtaskNode(
            id=node_id,
            description=description,
            priority=priorities[node_id],
            deps=deps,
            required_capability=family["capabilities"].get(node_id, ""),
        )
        for node_id, description, deps in family["subtasks"]
    )
    objective = (
        f"Report the {attributes[0][0]} of {subjects[0]} "
        f"and the {attributes[1][0]} of {subjects[1]}."
    )
    task = TaskSpec(
        id=task_id,
        task_type=task_type,
        objective=objective,
        subtasks=subtasks,
        validation_refs=tuple(entry.id for entry in entries),
        expected_output=" ".join(entry.text for entry in entries),
    )
    return task, entries


def generate_corpus(cases_per_task_type: int, seed: int) -> Corpus:
    """cases_per_task_type tasks for each of the three families."""
    tasks: List[TaskSpec] = []
    entries: Dict[str, KBEntry] = {}
    for task_type in TaskType:
        for index in range(cases_per_task_type):
            task, facts = _make_task(task_type, index, seed)
            tasks.append(task)
            entries.update({fact.id: fact for fact in facts})
    logger.info(f"Generated corpus: {len(tasks)} tasks, {len(entries)} KB facts")
    return Corpus(tasks=tuple(tasks), kb=ValidationKB(entries=entries))


def load_corpus(path: str) -> Corpus:
    """Load a corpus JSON file and validate every task's DAG."""
    try:
        corpus = Corpus.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: file not found") from e
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid corpus ({e.error_count()} errors, first: {e.errors()[0]['msg']})") from e

    problems = []
    for task in corpus.tasks:
        problems.extend(f"{task.id}: {violation}" for violation in validate_task(task))
        missing = [ref for ref in task.validation_refs if corpus.kb.get(ref) is None]
        problems.extend(f"{task.id}: unknown validation ref {ref}" for ref in missing)
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return corpus


def answer_text(task: TaskSpec, kb: ValidationKB) -> str:
    return " ".join(entry.text for entry in kb.resolve(task.validation_refs))


def incomplete_text(task: TaskSpec, unresolved: Sequence[str]) -> str:
    return f"Unable to complete task {task.id}: subtasks {', '.join(unresolved)} unresolved."


# ---------------------------------------------------------------------------
# Injection plans
# ---------------------------------------------------------------------------

class InjectionPlan(BaseModel):
    """Ground truth of one (task, repeat) instance. Only the world reads it."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    task_id: str
    repeat_index: int
    inject: bool = False
    failure_type: Optional[FailureType] = None
    target_step: Optional[int] = None
    target_subtask: Optional[str] = None
    target_tool: Optional[str] = None
    target_run: Optional[int] = None
    error_kind: Optional[ToolErrorKind] = None
    transient: bool = False
    recoverable: bool = False


def hallucination_start(task: TaskSpec) -> int:
    """Fabrication covers the last HALLUCINATION_SPAN steps: the final subtasks and the answer."""
    return max(len(task.subtasks) + 1 - HALLUCINATION_SPAN, 0)


class FaultSchedule:
    """What an injection does during one whole-task execution attempt."""

    def __init__(self, plan: Optional[InjectionPlan] = None, execution_attempt: int = 0):
        self.plan = plan
        self.execution_attempt = execution_attempt
        self.active = bool(
            plan is not None and plan.inject
            and not (plan.transient and execution_attempt > 0)
        )

    def _is(self, ftype: FailureType) -> bool:
        return self.active and self.plan.failure_type == ftype

    def tool_fault(self, tool_name: str) -> Optional[ToolErrorKind]:
        if self._is(FailureType.EXECUTION) and tool_name == self.plan.target_tool:
            return self.plan.error_kind
        return None

    def hallucination_step(self, task: TaskSpec) -> Optional[int]:
        """Completed-subtask count at which an F1 injection starts fabricating."""
        if not self._is(FailureType.HALLUCINATION):
            return None
        if self.plan.target_step is not None:
            return self.plan.target_step
        return hallucination_start(task)

    def hallucinating(self, prompt: PromptState, facts: Sequence[str]) -> bool:
        if not self._is(FailureType.HALLUCINATION):
            return False
        cited = {fact for block in prompt.corrections for fact in block.cited_facts()}
        return not all(fact in cited for fact in facts)

    def contradicting(self, run_index: int, plan_version: int) -> bool:
        if not self._is(FailureType.REASONING_INCONSISTENCY) or run_index != self.plan.target_run:
            return False
        return not (self.plan.recoverable and plan_version > 0)

    def broken_subtask(self) -> Optional[str]:
        if self._is(FailureType.WORKFLOW_PROPAGATION):
            return self.plan.target_subtask
        return None


# ---------------------------------------------------------------------------
# Tool sandbox
# ---------------------------------------------------------------------------

class ToolOutcome(BaseModel):
    model_config = ConfigDict(frozen=True)

    status: ActionStatus
    error_kind: Optional[ToolErrorKind] = None
    output: str = ""
    message: str = ""
    sim_time_ms: int = Field(ge=0)


def _scripted_output(tool: ToolSpec, args: str) -> str:
    for pattern, template in tool.behavior.items():
        if re.search(pattern, args):
            return template.format(args=args, tool=tool.name)
    return f"{tool.name}: no result"


def invoke_tool(
    tool: ToolSpec,
    args: str,
    rng: np.random.Generator,
    faults: Optional[FaultSchedule] = None,
) -> ToolOutcome:
    """
    Run one simulated tool call.

    An injected fault aimed at this tool wins; otherwise the tool's own
    fault profile is sampled. Both paths consume the same draws.
    """
    draw = float(rng.random())
    jitter = int(rng.integers(0, 50))

    kind = faults.tool_fault(tool.name) if faults is not None else None
    if kind is None:
        profile = tool.fault_profile
        if draw < profile.timeout:
            kind = ToolErrorKind.TIMEOUT
        elif draw < profile.timeout + profile.refusal:
            kind = ToolErrorKind.REFUSAL
        elif draw < profile.timeout + profile.refusal + profile.malformed:
            kind = ToolErrorKind.MALFORMED

    if kind is None:
        return ToolOutcome(
            status=ActionStatus.OK,
            output=_scripted_output(tool, args),
            sim_time_ms=tool.latency_ms + jitter,
        )
    if kind == ToolErrorKind.TIMEOUT:
        message, elapsed = f"no response within {tool.timeout_ms} ms", tool.timeout_ms
    elif kind == ToolErrorKind.REFUSAL:
        message, elapsed = "request declined by provider", REFUSAL_TIME_MS + jitter
    else:
        message, elapsed = "response failed schema validation", tool.latency_ms + jitter
    return ToolOutcome(
        status=ActionStatus.TOOL_ERROR, error_kind=kind, message=message, sim_time_ms=elapsed,
    )


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

class AgentContext(BaseModel):
    """What an agent backend sees when choosing its next step."""

    model_config = ConfigDict(frozen=True)

    task: TaskSpec
    prompt: PromptState
    step_index: int
    run_index: int
    step_budget: int
    ready: Tuple[str, ...] = ()
    # subtasks still runnable in this run, ready or not
    pending: Tuple[str, ...] = ()
    # subtasks that failed or were cut off in this run
    blocked: Tuple[str, ...] = ()
    statuses: Dict[str, SubtaskStatus] = Field(default_factory=dict)
    bindings: Dict[str, str] = Field(default_factory=dict)
    plan_version: int = 0


class AgentBackend(ABC):
    """Produces the next Action for a task; deterministic given context and rng."""

    name = "abstract"

    @abstractmethod
    def next_action(self, context: AgentContext, rng: np.random.Generator) -> Action:
        ...


def _confidence(rng: np.random.Generator) -> float:
    return float(rng.uniform(*CLEAN_CONFIDENCE))


def make_action(kind: ActionKind, context: AgentContext, confidence: float, **fields) -> Action:
    return Action(
        kind=kind,
        step_index=context.step_index,
        confidence=confidence,
        distribution=(confidence, 1.0 - confidence),
        **fields,
    )


class ScriptedAgent(AgentBackend):
    """
    Deterministic stand-in for an LLM agent.

    Executes ready subtasks in plan order (tool call when the subtask needs
    a capability, a reasoning step otherwise) and answers from the KB once
    nothing is left.
    """

    name = "scripted"

    def __init__(self, kb: ValidationKB):
        self.kb = kb

    def next_action(self, context: AgentContext, rng: np.random.Generator) -> Action:
        confidence = _confidence(rng)
        if context.ready:
            node = context.task.by_id()[context.ready[0]]
            if node.required_capability:
                tool = context.bindings.get(node.required_capability, node.required_capability)
                return make_action(
                    ActionKind.TOOL_CALL, context, confidence,
                    tool=tool, args=node.description, subtask_id=node.id,
                )
            return make_action(
                ActionKind.REASON, context, confidence,
                args=node.description, output=f"{node.description} complete", subtask_id=node.id,
            )
        return make_action(ActionKind.RESPOND, context, confidence, output=self.answer(context))

    def answer(self, context: AgentContext) -> str:
        unresolved = sorted(set(context.pending) | set(context.blocked))
        if unresolved:
            return incomplete_text(context.task, unresolved)
        return answer_text(context.task, self.kb)


class FaultInjectingAgent(AgentBackend):
    """
    Wraps a backend for one run and applies the scheduled fault to it.

    F1 replaces the last steps of the run with fabricated claims at
    decaying confidence. F3 makes the targeted run loop and then answer
    with the facts' values swapped. F4 makes the targeted subtask fail.
    """

    name = "fault-injecting"

    def __init__(
        self,
        inner: AgentBackend,
        faults: FaultSchedule,
        task: TaskSpec,
        kb: ValidationKB,
        run_index: int,
        loop_length: int = 4,
    ):
        self.inner = inner
        self.faults = faults
        self.task = task
        self.facts = kb.resolve(task.validation_refs)
        self.run_index = run_index
        self.loop_length = loop_length
        self._loops_emitted = 0
        self._hallucination: Optional[Dict[str, float]] = None

    def next_action(self, context: AgentContext, rng: np.random.Generator) -> Action:
        if self.faults.contradicting(self.run_index, context.plan_version):
            if self._loops_emitted < self.loop_length:
                self._loops_emitted += 1
                return make_action(
                    ActionKind.REASON, context, _confidence(rng),
                    args=LOOP_ARGS, output="premise unchanged",
                )

        start = self.faults.hallucination_step(self.task)
        done = len(self.task.subtasks) - len(context.pending)
        if self._hallucination is None and start is not None and done >= start:
            if self.faults.hallucinating(context.prompt, [fact.text for fact in self.facts]):
                self._hallucination = {
                    "base": _confidence(rng),
                    "total": len(context.pending) + 1,
                    "emitted": 0,
                }
        if self._hallucination is not None:
            return self._hallucinate(context, rng)

        action = self.inner.next_action(context, rng)

        broken = self.faults.broken_subtask()
        if broken is not None and action.subtask_id == broken:
            description = context.task.by_id()[broken].description
            return make_action(
                ActionKind.REASON, context, action.confidence,
                args=description, output=f"{description} failed: precondition not met",
                subtask_id=broken, subtask_failed=True,
            )

        if action.kind == ActionKind.RESPOND and self.faults.contradicting(self.run_index, context.plan_version):
            if action.output == " ".join(fact.text for fact in self.facts):
                return action.model_copy(update={"output": self._swapped_answer()})
        return action

    def _hallucinate(self, context: AgentContext, rng: np.random.Generator) -> Action:
        state = self._hallucination
        step = int(state["emitted"])
        state["emitted"] += 1
        confidence = state["base"] * CONFIDENCE_DECAY ** step
        if step < state["total"] - 1:
            return make_action(
                ActionKind.REASON, context, confidence,
                args=HALLUCINATION_ARGS, output=self._fabricated_phrase(rng),
            )
        claims = [f"{fact.subject} {self._fabricated_phrase(rng)}." for fact in self.facts]
        return make_action(ActionKind.RESPOND, context, confidence, output=" ".join(claims))

    @staticmethod
    def _fabricated_phrase(rng: np.random.Generator) -> str:
        first, second = rng.choice(NONCE_WORDS, size=2, replace=False)
        return f"{first} {second} {int(rng.integers(10000, 100000))}"

    def _swapped_answer(self) -> str:
        values = [fact.value for fact in self.facts]
        rotated = values[1:] + values[:1]
        claims = []
        for fact, value in zip(self.facts, rotated):
            marker = f" {fact.value} "
            cut = fact.text.rfind(marker)
            claims.append(fact.text[:cut] + f" {value} " + fact.text[cut + len(marker):])
        return " ".join(claims)


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------

def build_registry(seed: int, tool_fault_rate: float = 0.0) -> Dict[str, ToolSpec]:
    """Tool catalog with seed-perturbed eval scores and latencies."""
    registry: Dict[str, ToolSpec] = {}
    share = tool_fault_rate / 3
    for name, capabilities, cost, score, latency, behavior in TOOL_CATALOG:
        rng = rng_stream(seed, "tool", name)
        registry[name] = ToolSpec(
            name=name,
            capabilities=capabilities,
            resource_cost=cost,
            behavior=behavior,
            fault_profile=FaultProfile(timeout=share, refusal=share, malformed=share),
            eval_score=float(np.clip(score + rng.uniform(-0.02, 0.02), 0.0, 1.0)),
            latency_ms=latency + int(rng.integers(0, 40)),
            timeout_ms=1000,
        )
    return registry


class World:
    """Tool registry, KB and agent backend for one experiment seed."""

    def __init__(
        self,
        seed: int,
        corpus: Corpus,
        registry: Dict[str, ToolSpec],
        backend: AgentBackend,
        injection_prob: float = 0.30,
        transient_prob: float = 0.25,
        k: int = 3,
        loop_length: int = 4,
    ):
        self.seed = seed
        self.corpus = corpus
        self.kb = corpus.kb
        self.registry = registry
        self.backend = backend
        self.injection_prob = injection_prob
        self.transient_prob = transient_prob
        self.k = k
        self.loop_length = loop_length

    def tool(self, name: str) -> ToolSpec:
        if name not in self.registry:
            raise RegistryError(name)
        return self.registry[name]

    def tools_with(self, capability: str) -> List[ToolSpec]:
        return [tool for _, tool in sorted(self.registry.items()) if capability in tool.capabilities]

    def initial_bindings(self) -> Dict[str, str]:
        """Best tool per capability: eval score, then cost, then name."""
        capabilities = sorted({cap for tool in self.registry.values() for cap in tool.capabilities})
        bindings = {}
        for capability in capabilities:
            ranked = sorted(
                self.tools_with(capability),
                key=lambda tool: (-tool.eval_score, tool.resource_cost, tool.name),
            )
            bindings[capability] = ranked[0].name
        return bindings

    def rng(self, *parts) -> np.random.Generator:
        return rng_stream(self.seed, *parts)

    def draw_injection(self, task: TaskSpec, repeat_index: int) -> InjectionPlan:
        return draw_injection(task, repeat_index, self.rng(task.id, repeat_index, "injection"), self)

    def faults_for(self, plan: Optional[InjectionPlan], execution_attempt: int) -> FaultSchedule:
        return FaultSchedule(plan, execution_attempt)

    def agent_for_run(self, faults: FaultSchedule, task: TaskSpec, run_index: int,
                      backend: Optional[AgentBackend] = None) -> AgentBackend:
        return FaultInjectingAgent(
            backend or self.backend, faults, task, self.kb, run_index, self.loop_length,
        )

    def describe(self) -> str:
        """Canonical description; equal for equal (config, seed)."""
        return json.dumps({
            "seed": self.seed,
            "backend": self.backend.name,
            "tools": [tool.model_dump(mode="json") for _, tool in sorted(self.registry.items())],
            "tasks": len(self.corpus.tasks),
            "kb_entries": sorted(self.kb.entries),
            "injection_prob": self.injection_prob,
            "transient_prob": self.transient_prob,
        }, sort_keys=True)


def draw_injection(task: TaskSpec, repeat_index: int, rng: np.random.Generator, world: World) -> InjectionPlan:
    """
    Fault draw for one (task, repeat) instance.

    Every draw is consumed whether or not the instance is injected, so the
    stream layout does not depend on injection_prob.
    """
    inject = float(rng.random()) < world.injection_prob
    failure_type = list(FailureType)[int(rng.integers(0, 4))]
    transient = float(rng.random()) < world.transient_prob
    target_run = int(rng.integers(0, world.k))
    pick = float(rng.random())
    error_kind = INJECTED_ERROR_KINDS[int(rng.integers(0, len(INJECTED_ERROR_KINDS)))]

    if not inject:
        return InjectionPlan(task_id=task.id, repeat_index=repeat_index)

    plan = {"task_id": task.id, "repeat_index": repeat_index, "inject": True,
            "failure_type": failure_type, "transient": transient}
    if failure_type == FailureType.HALLUCINATION:
        plan.update(target_step=hallucination_start(task), recoverable=True)
    elif failure_type == FailureType.EXECUTION:
        tooled = [node for node in task.subtasks if node.required_capability]
        if not tooled:
            # nothing to break; fall back to an uninjected instance
            return InjectionPlan(task_id=task.id, repeat_index=repeat_index)
        node = tooled[min(int(pick * len(tooled)), len(tooled) - 1)]
        bindings = world.initial_bindings()
        plan.update(
            target_subtask=node.id,
            target_tool=bindings.get(node.required_capability),
            error_kind=error_kind,
            recoverable=len(world.tools_with(node.required_capability)) >= 2,
        )
    elif failure_type == FailureType.REASONING_INCONSISTENCY:
        plan.update(target_run=target_run, recoverable=world.k >= 3)
    else:
        dependents = task.dependents()
        candidates = sorted(
            (node for node in task.subtasks if dependents[node.id]),
            key=lambda node: (node.priority, node.id),
        )
        if not candidates:
            return InjectionPlan(task_id=task.id, repeat_index=repeat_index)
        node = candidates[min(int(pick * len(candidates)), len(candidates) - 1)]
        try:
            replan(task, [node.id])
            recoverable = True
        except PlanInfeasible:
            recoverable = False
        plan.update(target_subtask=node.id, recoverable=recoverable)
    return InjectionPlan(**plan)


def make_world(config: ExperimentConfig, seed: int, corpus: Optional[Corpus] = None,
               backend: Optional[AgentBackend] = None) -> World:
    """
    Build the simulation environment for a config and seed.

    The corpus is generated from the seed unless one is given; the scripted
    backend is used unless another is given.
    """
    corpus = corpus or generate_corpus(config.cases_per_task_type, seed)
    registry = build_registry(seed, config.tool_fault_rate)
    world = World(
        seed=seed,
        corpus=corpus,
        registry=registry,
        backend=backend or ScriptedAgent(corpus.kb),
        injection_prob=config.injection_prob,
        transient_prob=config.transient_prob,
        k=config.k,
        loop_length=config.detection.loop_window,
    )
    logger.debug(f"World ready: seed={seed}, {len(registry)} tools, {len(corpus.tasks)} tasks")
    return world
