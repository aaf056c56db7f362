"""
Agent backend adapters
Remote HTTP backend and OpenAI chat backend, both speaking the AgentBackend
interface the engine drives.
"""
import json
import logging
import os
from typing import Any, Optional

import httpx
import numpy as np
from openai import OpenAI
from pydantic import ValidationError

from src.errors import BackendError, ConfigError
from src.models import Action, ActionKind
from src.world import AgentBackend, AgentContext, ScriptedAgent, World

logger = logging.getLogger(__name__)

BACKEND_URL_VAR = "AGENT_BACKEND_URL"
OPENAI_KEY_VAR = "OPENAI_API_KEY"
BACKENDS = ("scripted", "remote", "openai")

SYSTEM_PROMPT = """You are a task agent executing a plan of subtasks.
Reply with a single JSON object with the keys:
  kind: one of "reason", "toolcall", "respond"
  tool: tool name (only for "toolcall")
  args: short text argument
  output: your reasoning result or final answer
  confidence: number between 0 and 1
Work on the first ready subtask. When no subtask is ready, respond with the final answer."""


def _parse_action(payload: Any, context: AgentContext) -> Action:
    """Turn a backend's JSON reply into an Action for the current step."""
    if not isinstance(payload, dict):
        raise BackendError(f"invalid action from backend: expected a JSON object, got {type(payload).__name__}")
    try:
        kind = ActionKind(str(payload.get("kind", "")).lower())
        subtask_id = context.ready[0] if context.ready and kind != ActionKind.RESPOND else None
        confidence = float(payload.get("confidence", 0.5))
        return Action(
            kind=kind,
            step_index=context.step_index,
            tool=payload.get("tool") if kind == ActionKind.TOOL_CALL else None,
            args=str(payload.get("args", "")),
            output=str(payload.get("output", "")),
            confidence=confidence,
            distribution=(confidence, 1.0 - confidence),
            subtask_id=subtask_id,
        )
    except (ValueError, TypeError, ValidationError) as e:
        raise BackendError(f"invalid action from backend: {e}") from e


class RemoteBackend(AgentBackend):
    """
    Agent served over HTTP.

    POSTs {task_id, prompt, step_index} and expects
    {kind, tool, args, output, confidence} back.
    """

    name = "remote"

    def __init__(self, url: str, timeout: float = 30.0, client: Optional[httpx.Client] = None):
        self.url = url
        self.client = client or httpx.Client(timeout=timeout)

    def next_action(self, context: AgentContext, rng: np.random.Generator) -> Action:
        body = {
            "task_id": context.task.id,
            "prompt": render_context(context),
            "step_index": context.step_index,
        }
        try:
            response = self.client.post(self.url, json=body)
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, json.JSONDecodeError) as e:
            logger.error(f"Remote backend call failed: {e}")
            raise BackendError(f"{self.url}: {e}") from e
        return _parse_action(payload, context)


class OpenAIBackend(AgentBackend):
    """Chat-completions agent. Model and sampling come from LLM_* variables."""

    name = "openai"

    def __init__(self, client: Optional[OpenAI] = None):
        self.client = client or OpenAI(api_key=os.getenv(OPENAI_KEY_VAR))
        self.llm_model = os.getenv("LLM_MODEL", "gpt-4o-mini")
        self.llm_temperature = float(os.getenv("LLM_TEMPERATURE", "0.0"))
        self.llm_max_tokens = int(os.getenv("LLM_MAX_TOKENS", "400"))
        logger.info(f"OpenAI backend initialized with model: {self.llm_model}")

    def next_action(self, context: AgentContext, rng: np.random.Generator) -> Action:
        try:
            response = self.client.chat.completions.create(
                model=self.llm_model,
                messages=[
                    {"role": "system", "content": SYSTEM_PROMPT},
                    {"role": "user", "content": render_context(context)},
                ],
                temperature=self.llm_temperature,
                max_tokens=self.llm_max_tokens,
                response_format={"type": "json_object"},
            )
            payload = json.loads(response.choices[0].message.content)
        except json.JSONDecodeError as e:
            raise BackendError(f"model returned non-JSON content: {e}") from e
        except Exception as e:
            logger.error(f"Error generating action: {e}")
            raise BackendError(f"OpenAI call failed: {e}") from e
        return _parse_action(payload, context)


def render_context(context: AgentContext) -> str:
    """Prompt text for model-backed agents."""
    nodes = context.task.by_id()
    ready = [f"- {node_id} ({nodes[node_id].description})" for node_id in context.ready]
    tools = [f"- {capability}: {tool}" for capability, tool in sorted(context.bindings.items())]
    return "\n".join([
        context.prompt.render(),
        "",
        f"Step {context.step_index} of at most {context.step_budget}.",
        "Ready subtasks:",
        *(ready or ["- none"]),
        "Tools:",
        *(tools or ["- none"]),
    ])


def create_backend(name: str, world_kb=None) -> AgentBackend:
    """
    Backend by name. Missing environment variables are configuration errors.
    """
    if name == "scripted":
        if world_kb is None:
            raise ConfigError("scripted backend needs a validation KB")
        return ScriptedAgent(world_kb)
    if name == "remote":
        url = os.getenv(BACKEND_URL_VAR)
        if not url:
            raise ConfigError(f"{BACKEND_URL_VAR} is not set; required for --backend remote")
        return RemoteBackend(url)
    if name == "openai":
        if not os.getenv(OPENAI_KEY_VAR):
            raise ConfigError(f"{OPENAI_KEY_VAR} is not set; required for --backend openai")
        return OpenAIBackend()
    raise ConfigError(f"unknown backend '{name}' (expected one of {', '.join(BACKENDS)})")


def check_backend_environment(name: str) -> None:
    """Fail early, before any work starts, if a backend cannot be built."""
    if name == "remote" and not os.getenv(BACKEND_URL_VAR):
        raise ConfigError(f"{BACKEND_URL_VAR} is not set; required for --backend remote")
    if name == "openai" and not os.getenv(OPENAI_KEY_VAR):
        raise ConfigError(f"{OPENAI_KEY_VAR} is not set; required for --backend openai")
    if name not in BACKENDS:
        raise ConfigError(f"unknown backend '{name}' (expected one of {', '.join(BACKENDS)})")


def attach_backend(world: World, name: str) -> World:
    """Swap the world's backend for the named one."""
    if name != "scripted":
        world.backend = create_backend(name, world.kb)
    return world
