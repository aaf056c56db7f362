"""
Runtime reliability model
Trajectory distances, consistency C, semantic score S, execution rate E,
the weighted score R = w1*C + w2*S + w3*E and the weight grid search.
"""
import logging
import math
import re
from enum import Enum
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.spatial.distance import jensenshannon

from src.errors import ContractError
from src.models import (
    Action,
    ActionKind,
    ActionStatus,
    ReliabilityScore,
    ReliabilityWeights,
    TaskSpec,
    Trajectory,
    ValidationKB,
    WEIGHT_TOLERANCE,
    weights_sum_to_one,
)

logger = logging.getLogger(__name__)

PUNCTUATION = re.compile(r"[^\w\s]")
CLAIM_BOUNDARY = re.compile(r"(?<=[.!?])\s+")
DISTRIBUTION_TOLERANCE = 1e-9

# Stands in for a missing step when trajectories of unequal length are aligned.
ABSENT = None


class DistanceKind(str, Enum):
    WEIGHTED_LEVENSHTEIN = "weighted_levenshtein"
    JENSEN_SHANNON = "jensen_shannon"


class OpWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    insert: float = Field(default=1.0, gt=0.0)
    delete: float = Field(default=1.0, gt=0.0)
    substitute: float = Field(default=1.0, gt=0.0)

    def max_weight(self) -> float:
        return max(self.insert, self.delete, self.substitute)


class ScoringConfig(BaseModel):
    """Scoring knobs, a JSON fragment of the experiment config."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    distance_kind: DistanceKind = DistanceKind.WEIGHTED_LEVENSHTEIN
    op_weights: OpWeights = Field(default_factory=OpWeights)
    jaccard_threshold: float = Field(default=0.6, gt=0.0, le=1.0)
    zero_tool_calls: Literal["vacuous", "reweight"] = "vacuous"
    evaluation: Literal["iteration", "step"] = "iteration"


# ---------------------------------------------------------------------------
# Text normalization
# ---------------------------------------------------------------------------

def normalize_tokens(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return PUNCTUATION.sub("", text.lower()).split()


def split_claims(text: str) -> List[str]:
    """Sentence-level claims; fragments without any word are dropped."""
    pieces = CLAIM_BOUNDARY.split(text.strip())
    return [piece for piece in pieces if normalize_tokens(piece)]


def jaccard(a: str, b: str) -> float:
    left, right = set(normalize_tokens(a)), set(normalize_tokens(b))
    if not left and not right:
        return 1.0
    return len(left & right) / len(left | right)


def outputs_match(output: str, expected: str) -> bool:
    """Task-success match: identical normalized token sequences."""
    return normalize_tokens(output) == normalize_tokens(expected)


def action_tokens(action: Action) -> List[str]:
    tokens = [action.kind.value]
    if action.tool is not None:
        tokens.append(action.tool.lower())
    tokens.extend(normalize_tokens(action.args))
    tokens.extend(normalize_tokens(action.output))
    return tokens


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def norm_edit_distance(
    x: Sequence[str], y: Sequence[str], op_weights: Optional[OpWeights] = None
) -> float:
    """Weighted Levenshtein distance over max(|x|,|y|) * max op weight."""
    weights = op_weights or OpWeights()
    n, m = len(x), len(y)
    if n == 0 and m == 0:
        return 0.0

    table = np.zeros((n + 1, m + 1))
    table[:, 0] = np.arange(n + 1) * weights.delete
    table[0, :] = np.arange(m + 1) * weights.insert
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            substitution = 0.0 if x[i - 1] == y[j - 1] else weights.substitute
            table[i, j] = min(
                table[i - 1, j] + weights.delete,
                table[i, j - 1] + weights.insert,
                table[i - 1, j - 1] + substitution,
            )
    return float(table[n, m] / (max(n, m) * weights.max_weight()))


def _as_distribution(values: Sequence[float], name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim != 1 or array.size == 0:
        raise ContractError(f"{name} must be a non-empty vector")
    if np.any(array < 0) or abs(float(array.sum()) - 1.0) > DISTRIBUTION_TOLERANCE:
        raise ContractError(f"{name} is not a probability distribution")
    return array


def jsd(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon divergence in bits, so the range is [0, 1]."""
    left = _as_distribution(p, "p")
    right = _as_distribution(q, "q")
    if left.shape != right.shape:
        raise ContractError(f"length mismatch: {left.size} vs {right.size}")
    # scipy returns the distance, i.e. the square root of the divergence
    distance = float(jensenshannon(left, right, base=2))
    if math.isnan(distance):
        return 0.0
    return min(distance ** 2, 1.0)


def step_distance(
    a: Optional[Action],
    b: Optional[Action],
    kind: DistanceKind = DistanceKind.WEIGHTED_LEVENSHTEIN,
    op_weights: Optional[OpWeights] = None,
) -> float:
    if a is ABSENT and b is ABSENT:
        return 0.0
    if a is ABSENT or b is ABSENT:
        return 1.0
    if kind == DistanceKind.JENSEN_SHANNON:
        if a.distribution is None or b.distribution is None:
            raise ContractError("Jensen-Shannon distance needs a distribution on every step")
        return jsd(a.distribution, b.distribution)
    return norm_edit_distance(action_tokens(a), action_tokens(b), op_weights)


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------

def consistency(
    bundle: Sequence[Trajectory],
    kind: DistanceKind = DistanceKind.WEIGHTED_LEVENSHTEIN,
    op_weights: Optional[OpWeights] = None,
) -> float:
    """
    Output consistency across K runs of the same task.

    Runs are aligned to the longest length T; a missing step is at distance
    1 from any real step and 0 from another missing step.
    """
    k = len(bundle)
    if k < 2:
        raise ContractError(f"consistency needs at least 2 runs, got {k}")
    length = max(len(traj.actions) for traj in bundle)
    if length == 0:
        return 1.0

    total = 0.0
    for t in range(length):
        steps = [traj.actions[t] if t < len(traj.actions) else ABSENT for traj in bundle]
        for i in range(k):
            for j in range(i + 1, k):
                total += step_distance(steps[i], steps[j], kind, op_weights)

    score = 1.0 - (2.0 * total) / (length * k * (k - 1))
    assert 0.0 <= score <= 1.0, score
    return score


def claim_support(claim: str, facts: Sequence[str]) -> float:
    """Best Jaccard overlap between a claim and any of the facts."""
    return max((jaccard(claim, fact) for fact in facts), default=0.0)


def _reference_facts(kb: ValidationKB, task: TaskSpec) -> List[str]:
    if not task.validation_refs:
        raise ContractError(f"task {task.id} has no validation references")
    return [entry.text for entry in kb.resolve(task.validation_refs)]


def unsupported_claims(
    final_output: str, kb: ValidationKB, task: TaskSpec, threshold: float = 0.6
) -> List[str]:
    facts = _reference_facts(kb, task)
    return [claim for claim in split_claims(final_output) if claim_support(claim, facts) < threshold]


def semantic_score(
    final_output: str, kb: ValidationKB, task: TaskSpec, threshold: float = 0.6
) -> float:
    """Share of the output's claims matching a referenced KB fact."""
    facts = _reference_facts(kb, task)
    claims = split_claims(final_output)
    if not claims:
        return 0.0
    matched = sum(1 for claim in claims if claim_support(claim, facts) >= threshold)
    return matched / len(claims)


def tool_call_count(traj: Trajectory) -> int:
    return sum(1 for action in traj.actions if action.kind == ActionKind.TOOL_CALL)


def execution_rate(traj: Trajectory) -> float:
    calls = [action for action in traj.actions if action.kind == ActionKind.TOOL_CALL]
    if not calls:
        return 1.0
    return sum(1 for action in calls if action.status == ActionStatus.OK) / len(calls)


def reliability(C: float, S: float, E: float, w: ReliabilityWeights) -> float:
    for name, value in (("C", C), ("S", S), ("E", E)):
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"{name}={value} outside [0, 1]")
    if not weights_sum_to_one(w):
        raise ContractError(f"invalid weights {w.as_tuple()}")
    score = math.fsum((w.w1 * C, w.w2 * S, w.w3 * E))
    # fsum of a convex combination can land one ulp above 1
    return min(score, 1.0)


# ---------------------------------------------------------------------------
# Bundle evaluation
# ---------------------------------------------------------------------------

def _effective_weights(
    bundle: Sequence[Trajectory], weights: ReliabilityWeights, scoring: ScoringConfig
) -> ReliabilityWeights:
    if scoring.zero_tool_calls != "reweight":
        return weights
    if any(tool_call_count(traj) for traj in bundle):
        return weights
    rest = weights.w1 + weights.w2
    if rest <= WEIGHT_TOLERANCE:
        return weights
    w1 = weights.w1 / rest
    return ReliabilityWeights(w1=w1, w2=1.0 - w1, w3=0.0)


def evaluate_bundle(
    bundle: Sequence[Trajectory],
    task: TaskSpec,
    kb: ValidationKB,
    weights: ReliabilityWeights,
    theta: float,
    scoring: Optional[ScoringConfig] = None,
    use_consistency: bool = True,
    step: Optional[int] = None,
) -> ReliabilityScore:
    """Score one K-run bundle. Single-run bundles report C = 1 as unavailable."""
    scoring = scoring or ScoringConfig()
    if not bundle:
        raise ContractError("cannot score an empty bundle")

    c_available = use_consistency and len(bundle) >= 2
    C = consistency(bundle, scoring.distance_kind, scoring.op_weights) if c_available else 1.0

    S = float(np.mean([
        semantic_score(traj.final_output, kb, task, scoring.jaccard_threshold) for traj in bundle
    ]))
    E = float(np.mean([execution_rate(traj) for traj in bundle]))

    effective = _effective_weights(bundle, weights, scoring)
    R = reliability(C, S, E, effective)
    return ReliabilityScore(
        C=C, S=S, E=E, R=R, theta=theta,
        w1=effective.w1, w2=effective.w2, w3=effective.w3,
        c_available=c_available, step=step,
    )


def _prefix(traj: Trajectory, length: int) -> Trajectory:
    actions = traj.actions[:length]
    responded = any(action.kind == ActionKind.RESPOND for action in actions)
    return traj.model_copy(update={
        "actions": actions,
        "final_output": traj.final_output if responded else "",
        "completed": responded,
    })


def evaluate_prefixes(
    bundle: Sequence[Trajectory],
    task: TaskSpec,
    kb: ValidationKB,
    weights: ReliabilityWeights,
    theta: float,
    scoring: Optional[ScoringConfig] = None,
    use_consistency: bool = True,
) -> List[ReliabilityScore]:
    """
    One score per step prefix of the bundle.

    Before a run has responded it has claimed nothing, so its S counts as 1
    until its Respond step enters the prefix.
    """
    scoring = scoring or ScoringConfig()
    length = max((len(traj.actions) for traj in bundle), default=0)
    scores: List[ReliabilityScore] = []
    for t in range(1, length + 1):
        prefixes = [_prefix(traj, t) for traj in bundle]
        partial = evaluate_bundle(prefixes, task, kb, weights, theta, scoring, use_consistency, t - 1)
        pending = [traj for traj in prefixes if not traj.completed]
        if pending:
            responded = [traj for traj in prefixes if traj.completed]
            s_values = [1.0] * len(pending) + [
                semantic_score(traj.final_output, kb, task, scoring.jaccard_threshold)
                for traj in responded
            ]
            S = float(np.mean(s_values))
            effective = ReliabilityWeights(w1=partial.w1, w2=partial.w2, w3=partial.w3)
            partial = ReliabilityScore(
                C=partial.C, S=S, E=partial.E,
                R=reliability(partial.C, S, partial.E, effective),
                theta=theta, w1=partial.w1, w2=partial.w2, w3=partial.w3,
                c_available=partial.c_available, step=t - 1,
            )
        scores.append(partial)
    return scores


# ---------------------------------------------------------------------------
# Weight grid search
# ---------------------------------------------------------------------------

class LabeledRun(BaseModel):
    """Bundle components with ground truth, the grid search's input."""

    model_config = ConfigDict(frozen=True)

    C: float = Field(ge=0.0, le=1.0)
    S: float = Field(ge=0.0, le=1.0)
    E: float = Field(ge=0.0, le=1.0)
    injected: bool
    succeeded: bool = True


class GridSearchResult(BaseModel):
    w1: float
    w2: float
    w3: float
    objective: float
    objective_name: str
    step: float
    candidates: int

    def weights(self) -> ReliabilityWeights:
        return ReliabilityWeights(w1=self.w1, w2=self.w2, w3=self.w3)


def simplex_points(step: float) -> List[Tuple[float, float, float]]:
    """All (w1, w2, w3) on the step grid summing to 1, lexicographic order."""
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > WEIGHT_TOLERANCE:
        raise ContractError(f"step {step} does not divide 1 evenly")
    return [(a / n, b / n, (n - a - b) / n) for a in range(n + 1) for b in range(n + 1 - a)]


def _objective_value(
    runs: Sequence[LabeledRun], weights: Tuple[float, float, float], theta: float, objective: str
) -> float:
    w1, w2, w3 = weights
    flagged = [w1 * run.C + w2 * run.S + w3 * run.E < theta for run in runs]
    if objective == "tsr":
        agree = sum(1 for run, flag in zip(runs, flagged) if (not flag) == run.succeeded)
        return agree / len(runs)
    tp = sum(1 for run, flag in zip(runs, flagged) if flag and run.injected)
    fp = sum(1 for run, flag in zip(runs, flagged) if flag and not run.injected)
    fn = sum(1 for run, flag in zip(runs, flagged) if not flag and run.injected)
    denominator = 2 * tp + fp + fn
    return 1.0 if denominator == 0 else 2 * tp / denominator


def grid_search_weights(
    labeled_runs: Sequence[LabeledRun],
    step: float = 0.1,
    objective: str = "f1",
    theta: float = 0.65,
) -> GridSearchResult:
    """
    Exhaustive search over the weight simplex.

    objective "f1": F1 of the R < theta trigger against injection labels.
    objective "tsr": agreement of R >= theta with actual task success.
    Ties go to the lexicographically smallest weights.
    """
    if not labeled_runs:
        raise ContractError("grid search needs at least one labeled run")
    if objective not in ("f1", "tsr"):
        raise ContractError(f"unknown objective {objective}")

    points = simplex_points(step)
    best_point, best_value = points[0], -1.0
    for point in points:
        value = _objective_value(labeled_runs, point, theta, objective)
        if value > best_value:
            best_point, best_value = point, value

    logger.info(f"Evaluated {len(points)} weight candidates")
    return GridSearchResult(
        w1=best_point[0], w2=best_point[1], w3=best_point[2],
        objective=best_value, objective_name=objective, step=step,
        candidates=len(points),
    )
