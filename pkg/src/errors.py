"""
Exception hierarchy for the Aegis runtime.
"""


class AegisError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AegisError):
    """A configuration, corpus or environment value is invalid."""


class ContractError(AegisError):
    """A precondition of a pure function was violated by its caller."""


class UsageError(AegisError):
    """Command-line usage error (bad flag, missing argument)."""


class RegistryError(AegisError):
    """A tool name is not present in the tool registry."""

    def __init__(self, tool_name: str):
        super().__init__(f"Unknown tool: {tool_name}")
        self.tool_name = tool_name


class BackendError(AegisError):
    """A remote agent backend failed or answered with an invalid action."""


class HealingExhausted(AegisError):
    """No healing attempts are left for the task."""


class NoAlternativeTool(AegisError):
    """Tool re-selection found no candidate sharing the capability."""


class PlanInfeasible(AegisError):
    """Re-planning excluded every path to the task's terminal subtasks."""
