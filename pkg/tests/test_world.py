"""
Tests for the simulated world: corpus, tools, agents and fault injection
"""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import parse_config
from src.errors import ConfigError, RegistryError
from src.models import (
    ActionKind,
    ActionStatus,
    CorrectionBlock,
    FailureType,
    FaultProfile,
    FlaggedClaim,
    PromptState,
    TaskType,
    ToolErrorKind,
    ToolSpec,
    validate_task,
)
from src.world import (
    AgentContext,
    FaultSchedule,
    InjectionPlan,
    HALLUCINATION_ARGS,
    ScriptedAgent,
    answer_text,
    derive_seed,
    generate_corpus,
    hallucination_start,
    invoke_tool,
    load_corpus,
    make_world,
    rng_stream,
)


@pytest.fixture
def world():
    return make_world(parse_config({"cases_per_task_type": 2}), seed=7)


def context_for(task, bindings, ready=(), pending=(), blocked=(), prompt=None, plan_version=0):
    return AgentContext(
        task=task,
        prompt=prompt or PromptState(objective=task.objective),
        step_index=0,
        run_index=0,
        step_budget=32,
        ready=tuple(ready),
        pending=tuple(pending),
        blocked=tuple(blocked),
        bindings=bindings,
        plan_version=plan_version,
    )


def plan_for(failure_type, **fields) -> InjectionPlan:
    return InjectionPlan(task_id="t", repeat_index=0, inject=True, failure_type=failure_type, **fields)


class TestSeeds:
    """Tests for seeded streams."""

    def test_derive_seed_is_stable(self):
        """The same key always gives the same 64-bit seed."""
        assert derive_seed(42, "run", 0) == derive_seed(42, "run", 0)
        assert derive_seed(42, "run", 0) != derive_seed(42, "run", 1)
        assert 0 <= derive_seed(42, "x") < 2 ** 64

    def test_streams_are_independent_of_order(self):
        """A stream depends on its key only."""
        first = rng_stream(1, "a").random(3)
        rng_stream(1, "b").random(10)
        assert np.array_equal(first, rng_stream(1, "a").random(3))


class TestCorpus:
    """Tests for corpus generation and loading."""

    def test_size_and_validity(self):
        """Each family gets the requested number of valid tasks."""
        corpus = generate_corpus(3, seed=5)
        assert len(corpus.tasks) == 9
        assert {task.task_type for task in corpus.tasks} == set(TaskType)
        assert all(validate_task(task) == [] for task in corpus.tasks)

    def test_expected_output_is_the_facts(self):
        """The reference answer is the concatenated validation facts."""
        corpus = generate_corpus(2, seed=5)
        for task in corpus.tasks:
            assert len(task.validation_refs) == 2
            assert task.expected_output == answer_text(task, corpus.kb)

    def test_deterministic(self):
        """Equal seeds give equal corpora; different seeds differ."""
        assert generate_corpus(2, seed=11).to_json() == generate_corpus(2, seed=11).to_json()
        assert generate_corpus(2, seed=11).to_json() != generate_corpus(2, seed=12).to_json()

    def test_load_round_trip(self, tmp_path):
        """A written corpus loads back unchanged."""
        corpus = generate_corpus(2, seed=3)
        path = tmp_path / "corpus.json"
        path.write_text(corpus.to_json())
        assert load_corpus(str(path)) == corpus

    def test_load_reports_cycles(self, tmp_path):
        """A cyclic task is reported with its id."""
        corpus = generate_corpus(1, seed=3)
        task = corpus.tasks[0]
        nodes = list(task.subtasks)
        nodes[0] = nodes[0].model_copy(update={"deps": ("s4",)})
        broken = corpus.model_copy(update={"tasks": (task.model_copy(update={"subtasks": tuple(nodes)}),)})
        path = tmp_path / "corpus.json"
        path.write_text(broken.to_json())
        with pytest.raises(ConfigError, match=f"{task.id}: cycle"):
            load_corpus(str(path))

    def test_load_missing(self, tmp_path):
        """A missing corpus file is a ConfigError."""
        with pytest.raises(ConfigError, match="not found"):
            load_corpus(str(tmp_path / "nope.json"))

    def test_load_garbage(self, tmp_path):
        """Malformed corpus JSON is a ConfigError."""
        path = tmp_path / "corpus.json"
        path.write_text(json.dumps({"tasks": "nope"}))
        with pytest.raises(ConfigError, match="invalid corpus"):
            load_corpus(str(path))


class TestInvokeTool:
    """Tests for the tool sandbox."""

    def test_clean_call(self, world):
        """A fault-free tool answers from its behavior table."""
        tool = world.tool("orders_api")
        outcome = invoke_tool(tool, "fetch order records", rng_stream(1, "t"))
        assert outcome.status == ActionStatus.OK
        assert outcome.output == "orders payload for fetch order records"
        assert outcome.sim_time_ms >= tool.latency_ms

    def test_injected_fault_wins(self, world):
        """A scheduled fault aimed at the tool makes it fail."""
        faults = FaultSchedule(plan_for(FailureType.EXECUTION, target_tool="orders_api",
                                        error_kind=ToolErrorKind.TIMEOUT))
        outcome = invoke_tool(world.tool("orders_api"), "fetch", rng_stream(1, "t"), faults)
        assert outcome.status == ActionStatus.TOOL_ERROR
        assert outcome.error_kind == ToolErrorKind.TIMEOUT
        assert outcome.sim_time_ms == 1000

    def test_other_tools_unaffected(self, world):
        """A fault aimed elsewhere leaves the tool alone."""
        faults = FaultSchedule(plan_for(FailureType.EXECUTION, target_tool="orders_api",
                                        error_kind=ToolErrorKind.REFUSAL))
        outcome = invoke_tool(world.tool("orders_replica"), "fetch", rng_stream(1, "t"), faults)
        assert outcome.status == ActionStatus.OK

    def test_fault_profile(self):
        """A tool that always refuses reports a refusal."""
        tool = ToolSpec(name="grumpy", capabilities=("x",), resource_cost=1.0,
                        fault_profile=FaultProfile(refusal=1.0))
        outcome = invoke_tool(tool, "anything", rng_stream(1, "t"))
        assert outcome.error_kind == ToolErrorKind.REFUSAL
        assert outcome.message == "request declined by provider"

    def test_unknown_tool(self, world):
        """Looking up a missing tool raises RegistryError."""
        with pytest.raises(RegistryError):
            world.tool("teleporter")


class TestFaultSchedule:
    """Tests for when an injection is active."""

    def test_transient_fault_clears_on_retry(self):
        """A transient injection is only active on the first execution."""
        plan = plan_for(FailureType.EXECUTION, target_tool="a", error_kind=ToolErrorKind.TIMEOUT, transient=True)
        assert FaultSchedule(plan, 0).tool_fault("a") == ToolErrorKind.TIMEOUT
        assert FaultSchedule(plan, 1).tool_fault("a") is None

    def test_persistent_fault_stays(self):
        """A persistent injection survives re-execution."""
        plan = plan_for(FailureType.EXECUTION, target_tool="a", error_kind=ToolErrorKind.TIMEOUT)
        assert FaultSchedule(plan, 3).tool_fault("a") == ToolErrorKind.TIMEOUT

    def test_contradiction_recovers_after_replan(self):
        """A recoverable contradiction stops once the plan changes."""
        plan = plan_for(FailureType.REASONING_INCONSISTENCY, target_run=1, recoverable=True)
        faults = FaultSchedule(plan)
        assert faults.contradicting(1, 0)
        assert not faults.contradicting(0, 0)
        assert not faults.contradicting(1, 1)

    def test_hallucination_stops_once_facts_are_cited(self):
        """Citing every fact in a correction ends the hallucination."""
        faults = FaultSchedule(plan_for(FailureType.HALLUCINATION, recoverable=True))
        facts = ["fact one.", "fact two."]
        assert faults.hallucinating(PromptState(objective="o"), facts)
        corrected = PromptState(objective="o", corrections=(CorrectionBlock(
            objective="o", flagged=(FlaggedClaim(claim="c", facts=tuple(facts)),)),))
        assert not faults.hallucinating(corrected, facts)

    def test_no_plan_is_inactive(self):
        """Without a plan nothing is injected."""
        faults = FaultSchedule(None)
        assert not faults.active
        assert faults.broken_subtask() is None


class TestAgents:
    """Tests for the scripted and fault-injecting agents."""

    def test_tool_call_for_capability(self, world):
        """A ready subtask with a capability becomes a call to the bound tool."""
        task = world.corpus.tasks[0]
        bindings = world.initial_bindings()
        action = ScriptedAgent(world.kb).next_action(context_for(task, bindings, ready=["s1"]), world.rng("a"))
        assert action.kind == ActionKind.TOOL_CALL
        assert action.tool == bindings["search"]
        assert action.subtask_id == "s1"

    def test_reason_without_capability(self, world):
        """A ready subtask without a capability is a reasoning step."""
        task = world.corpus.tasks[0]
        action = ScriptedAgent(world.kb).next_action(context_for(task, {}, ready=["s2"]), world.rng("a"))
        assert action.kind == ActionKind.REASON
        assert action.output == "derive primary estimate complete"

    def test_respond_with_facts(self, world):
        """With nothing left the agent answers with the facts."""
        task = world.corpus.tasks[0]
        action = ScriptedAgent(world.kb).next_action(context_for(task, {}), world.rng("a"))
        assert action.kind == ActionKind.RESPOND
        assert action.output == task.expected_output

    def test_respond_incomplete(self, world):
        """Unresolved subtasks produce the incomplete answer."""
        task = world.corpus.tasks[0]
        action = ScriptedAgent(world.kb).next_action(context_for(task, {}, blocked=["s4"]), world.rng("a"))
        assert action.output == f"Unable to complete task {task.id}: subtasks s4 unresolved."

    def test_broken_subtask(self, world):
        """An F4 injection turns the targeted subtask into a failed step."""
        task = world.corpus.tasks[0]
        faults = FaultSchedule(plan_for(FailureType.WORKFLOW_PROPAGATION, target_subtask="s2"))
        agent = world.agent_for_run(faults, task, 0)
        action = agent.next_action(context_for(task, {}, ready=["s2"]), world.rng("a"))
        assert action.subtask_failed
        assert action.subtask_id == "s2"

    def test_hallucination_starts_at_target_step(self, world):
        """An F1 plan fabricates from its target step on, not before."""
        task = world.corpus.tasks[0]
        all_pending = [node.id for node in task.subtasks]
        early = FaultSchedule(plan_for(FailureType.HALLUCINATION, recoverable=True, target_step=0))
        late = FaultSchedule(plan_for(FailureType.HALLUCINATION, recoverable=True,
                                      target_step=hallucination_start(task)))
        context = context_for(task, {}, ready=["s1"], pending=all_pending)

        action = world.agent_for_run(early, task, 0).next_action(context, world.rng("a"))
        assert action.args == HALLUCINATION_ARGS
        assert action.subtask_id is None
        action = world.agent_for_run(late, task, 0).next_action(context, world.rng("a"))
        assert action.args != HALLUCINATION_ARGS
        assert action.subtask_id == "s1"

    def test_drawn_hallucination_carries_target_step(self):
        """Drawn F1 plans record where fabrication starts."""
        world = make_world(parse_config({"cases_per_task_type": 1, "injection_prob": 1.0}), 5)
        task = world.corpus.tasks[0]
        plans = [world.draw_injection(task, i) for i in range(200)]
        f1 = [plan for plan in plans if plan.inject and plan.failure_type == FailureType.HALLUCINATION]
        assert f1
        assert {plan.target_step for plan in f1} == {len(task.subtasks) + 1 - 3}

    def test_loop_then_swapped_answer(self, world):
        """An F3 run loops, then answers with the values rotated."""
        task = world.corpus.tasks[0]
        faults = FaultSchedule(plan_for(FailureType.REASONING_INCONSISTENCY, target_run=0))
        agent = world.agent_for_run(faults, task, 0)
        rng = world.rng("a")
        kinds = [agent.next_action(context_for(task, {}), rng) for _ in range(5)]
        assert [a.kind for a in kinds[:4]] == [ActionKind.REASON] * 4
        assert kinds[4].kind == ActionKind.RESPOND
        assert kinds[4].output != task.expected_output


class TestWorld:
    """Tests for world assembly and injection draws."""

    def test_bindings_cover_capabilities(self, world):
        """Every capability is bound to its best-scoring tool."""
        bindings = world.initial_bindings()
        assert set(bindings) == {"search", "fetch", "enrich", "submit", "parse", "ocr", "validate"}
        for capability, name in bindings.items():
            best = max(tool.eval_score for tool in world.tools_with(capability))
            assert world.tool(name).eval_score == best

    def test_describe_is_reproducible(self):
        """Equal config and seed describe equal worlds."""
        cfg = parse_config({"cases_per_task_type": 1})
        assert make_world(cfg, 9).describe() == make_world(cfg, 9).describe()

    def test_no_injection_at_zero_probability(self):
        """injection_prob 0 never injects."""
        world = make_world(parse_config({"cases_per_task_type": 3, "injection_prob": 0.0}), 1)
        assert not any(world.draw_injection(task, 0).inject for task in world.corpus.tasks)

    def test_injection_targets(self):
        """With injection_prob 1 every plan names a target for its type."""
        world = make_world(parse_config({"cases_per_task_type": 5, "injection_prob": 1.0}), 1)
        bindings = world.initial_bindings()
        for task in world.corpus.tasks:
            plan = world.draw_injection(task, 0)
            assert plan.inject
            if plan.failure_type == FailureType.EXECUTION:
                node = task.by_id()[plan.target_subtask]
                assert plan.target_tool == bindings[node.required_capability]
            elif plan.failure_type == FailureType.REASONING_INCONSISTENCY:
                assert 0 <= plan.target_run < world.k
            elif plan.failure_type == FailureType.WORKFLOW_PROPAGATION:
                assert task.dependents()[plan.target_subtask]
                assert plan.recoverable == (plan.target_subtask != "s1")

    def test_draws_are_reproducible(self, world):
        """The same (task, repeat) always draws the same plan."""
        task = world.corpus.tasks[0]
        assert world.draw_injection(task, 1) == world.draw_injection(task, 1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
