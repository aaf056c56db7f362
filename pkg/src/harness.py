"""
Experiment harness
Runs every policy over the corpus with shared fault draws, computes the
TSR / FDA / RSR / EO metrics and the paired Wilcoxon comparisons, and
writes the run directory atomically.
"""
import json
import logging
import os
import shutil
import tempfile
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel

from src.backends import attach_backend, check_backend_environment
from src.config import ExperimentConfig
from src.engine import (
    RunRecord,
    RunSettings,
    execute_task,
    execution_seed,
    parse_policy,
    run_k_samples,
    select_final,
)
from src.errors import ConfigError, ContractError
from src.models import FailureType, Outcome, TaskType
from src.reliability import GridSearchResult, LabeledRun, evaluate_bundle, grid_search_weights, outputs_match
from src.report import (
    CLEAN,
    UNDETECTED,
    Comparison,
    FDAResult,
    MetricsReport,
    PolicyMetrics,
    SliceMetrics,
    TypeScores,
    dump_pretty,
    render_csv,
    render_json,
    write_file_atomically,
)
from src.stats import wilcoxon_signed_rank
from src.world import Corpus, InjectionPlan, World, derive_seed, generate_corpus, load_corpus, make_world

logger = logging.getLogger(__name__)

BASELINE_POLICY = "b1"
PROPOSED_POLICY = "proposed"


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _injected_type(record: RunRecord) -> Optional[FailureType]:
    plan = record.injection
    if plan is None or not plan.inject:
        return None
    return plan.failure_type


def _predicted_type(record: RunRecord) -> Optional[FailureType]:
    if not record.events:
        return None
    return record.first_classification or record.events[0].failure_type


def tsr(records: Sequence[RunRecord]) -> float:
    if not records:
        raise ContractError("tsr needs at least one record")
    return sum(1 for record in records if record.outcome == Outcome.SUCCEEDED) / len(records)


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def fda(records: Sequence[RunRecord]) -> FDAResult:
    """
    Record-level detection accuracy.

    A record is detected iff it has at least one failure event. Per-type
    scores compare the first classification with the injected type.
    """
    labels = [ftype.value for ftype in FailureType]
    confusion = {row: {col: 0 for col in labels + [UNDETECTED]} for row in labels + [CLEAN]}
    true_detections = true_negatives = false_alarms = missed = 0

    for record in records:
        injected = _injected_type(record)
        predicted = _predicted_type(record)
        row = injected.value if injected is not None else CLEAN
        col = predicted.value if predicted is not None else UNDETECTED
        confusion[row][col] += 1
        if injected is not None:
            if record.detected:
                true_detections += 1
            else:
                missed += 1
        elif record.detected:
            false_alarms += 1
        else:
            true_negatives += 1

    per_type = {}
    for label in labels:
        hits = confusion[label][label]
        predicted_total = sum(confusion[row][label] for row in confusion)
        injected_total = sum(confusion[label].values())
        precision = _ratio(hits, predicted_total)
        recall = _ratio(hits, injected_total)
        f1 = None
        if precision is not None and recall is not None:
            f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_type[label] = TypeScores(precision=precision, recall=recall, f1=f1)

    total = len(records)
    return FDAResult(
        accuracy=(true_detections + true_negatives) / total if total else 0.0,
        true_detections=true_detections,
        true_negatives=true_negatives,
        false_alarms=false_alarms,
        missed=missed,
        per_type=per_type,
        confusion=confusion,
    )


def rsr(records: Sequence[RunRecord]) -> Optional[float]:
    """Recovered share of detected records; None when nothing was detected."""
    detected = [record for record in records if record.detected]
    if not detected:
        return None
    return sum(1 for record in detected if record.outcome == Outcome.SUCCEEDED) / len(detected)


def _pair_key(record: RunRecord) -> Tuple[str, int]:
    return record.task_id, record.repeat_index


def _check_pairing(framework: Sequence[RunRecord], baseline: Sequence[RunRecord]) -> None:
    left = sorted(_pair_key(record) for record in framework)
    right = sorted(_pair_key(record) for record in baseline)
    if left != right:
        raise ContractError("framework and baseline records cover different (task, repeat) pairs")


def eo(framework: Sequence[RunRecord], baseline: Sequence[RunRecord]) -> float:
    """Relative simulated-time overhead against the baseline."""
    _check_pairing(framework, baseline)
    base = sum(record.sim_time_ms for record in baseline)
    if base == 0:
        raise ContractError("baseline records have zero simulated time")
    return (sum(record.sim_time_ms for record in framework) - base) / base


def eo_wall(framework: Sequence[RunRecord], baseline: Sequence[RunRecord]) -> Optional[float]:
    _check_pairing(framework, baseline)
    base = sum(record.wall_ms for record in baseline)
    if base <= 0:
        return None
    return (sum(record.wall_ms for record in framework) - base) / base


def check_paired_design(records: Iterable[RunRecord]) -> None:
    """Every policy must have faced the same injection for a (task, repeat)."""
    seen: Dict[Tuple[str, int], Optional[InjectionPlan]] = {}
    for record in records:
        key = _pair_key(record)
        if key in seen and seen[key] != record.injection:
            raise ContractError(f"injection differs across policies for {key[0]} repeat {key[1]}")
        seen.setdefault(key, record.injection)


def _paired(left: Sequence[RunRecord], right: Sequence[RunRecord]) -> List[Tuple[RunRecord, RunRecord]]:
    _check_pairing(left, right)
    by_key = {_pair_key(record): record for record in right}
    return [(record, by_key[_pair_key(record)]) for record in sorted(left, key=_pair_key)]


def compare(proposed: Sequence[RunRecord], baseline: Sequence[RunRecord], name: str) -> List[Comparison]:
    """Wilcoxon on paired success indicators and on paired simulated time."""
    pairs = _paired(proposed, baseline)
    success = [
        float(a.outcome == Outcome.SUCCEEDED) - float(b.outcome == Outcome.SUCCEEDED) for a, b in pairs
    ]
    sim_time = [float(a.sim_time_ms - b.sim_time_ms) for a, b in pairs]
    return [
        Comparison(baseline=name, quantity="success", test=wilcoxon_signed_rank(success)),
        Comparison(baseline=name, quantity="sim_time_ms", test=wilcoxon_signed_rank(sim_time)),
    ]


def _slice(records: Sequence[RunRecord], baseline: Optional[Sequence[RunRecord]]) -> SliceMetrics:
    return SliceMetrics(
        records=len(records),
        tsr=tsr(records),
        fda=fda(records).accuracy,
        rsr=rsr(records),
        eo=eo(records, baseline) if baseline else None,
    )


def compute_report(records: Sequence[RunRecord], master_seed: int) -> MetricsReport:
    """Aggregate records into a report; independent of record order."""
    check_paired_design(records)
    by_policy: Dict[str, List[RunRecord]] = defaultdict(list)
    for record in records:
        by_policy[record.policy].append(record)
    for group in by_policy.values():
        group.sort(key=_pair_key)

    baseline = by_policy.get(BASELINE_POLICY)
    policies = {}
    for name in sorted(by_policy):
        group = by_policy[name]
        types = {}
        for task_type in TaskType:
            subset = [record for record in group if record.task_type == task_type]
            if not subset:
                continue
            base_subset = [record for record in baseline if record.task_type == task_type] if baseline else None
            types[task_type.value] = _slice(subset, base_subset)
        policies[name] = PolicyMetrics(
            records=len(group),
            tsr=tsr(group),
            fda=fda(group),
            rsr=rsr(group),
            detected=sum(1 for record in group if record.detected),
            eo=eo(group, baseline) if baseline else None,
            eo_wall_measured=eo_wall(group, baseline) if baseline else None,
            healing_actions=sum(len(record.healing_actions) for record in group),
            by_task_type=types,
        )

    comparisons: List[Comparison] = []
    if PROPOSED_POLICY in by_policy:
        for name in sorted(by_policy):
            if name != PROPOSED_POLICY:
                comparisons.extend(compare(by_policy[PROPOSED_POLICY], by_policy[name], name))

    instances = {_pair_key(record): _injected_type(record) is not None for record in records}
    return MetricsReport(
        master_seed=master_seed,
        instances=len(instances),
        injected=sum(instances.values()),
        policies=policies,
        comparisons=comparisons,
    )


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

class WorkItem(BaseModel):
    task_index: int
    repeat_index: int
    policy: str
    injection: InjectionPlan


_worker_world: Optional[World] = None
_worker_config: Optional[ExperimentConfig] = None


def _init_worker(cfg: ExperimentConfig, seed: int, corpus: Corpus, backend: str) -> None:
    global _worker_world, _worker_config
    _worker_config = cfg
    _worker_world = attach_backend(make_world(cfg, seed, corpus), backend)


def _run_item(item: WorkItem) -> RunRecord:
    world, cfg = _worker_world, _worker_config
    task = world.corpus.tasks[item.task_index]
    seed = derive_seed(world.seed, task.id, item.repeat_index)
    policy = parse_policy(item.policy, cfg)
    return execute_task(task, policy, world, cfg, seed, item.injection, item.repeat_index)


def build_corpus(cfg: ExperimentConfig, seed: int) -> Corpus:
    if cfg.corpus_path:
        return load_corpus(cfg.corpus_path)
    return generate_corpus(cfg.cases_per_task_type, seed)


def plan_work(world: World, cfg: ExperimentConfig, policies: Sequence[str]) -> List[WorkItem]:
    """One item per (task, repeat, policy); the injection is drawn once per (task, repeat)."""
    items = []
    for task_index, task in enumerate(world.corpus.tasks):
        for repeat_index in range(cfg.repeats):
            injection = world.draw_injection(task, repeat_index)
            if injection.inject:
                logger.debug(f"{task.id} r{repeat_index}: injected {injection.failure_type.value}")
            for policy in policies:
                items.append(WorkItem(
                    task_index=task_index, repeat_index=repeat_index,
                    policy=policy, injection=injection,
                ))
    return items


def execute_work(items: Sequence[WorkItem], cfg: ExperimentConfig, seed: int, corpus: Corpus,
                 backend: str = "scripted", jobs: Optional[int] = None) -> List[RunRecord]:
    """Run work items, in-process for one job and in a process pool otherwise."""
    jobs = jobs or cfg.jobs or os.cpu_count() or 1
    if jobs == 1:
        _init_worker(cfg, seed, corpus, backend)
        records = [_run_item(item) for item in items]
    else:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_init_worker, initargs=(cfg, seed, corpus, backend)
        ) as executor:
            records = list(executor.map(_run_item, items, chunksize=max(1, len(items) // (jobs * 8))))
    records.sort(key=lambda record: (record.policy, record.task_id, record.repeat_index))
    return records


def write_atomically(dest: Path, files: Dict[str, str]) -> None:
    """
    Write a directory of text files: built in a sibling temp directory and
    renamed into place, so dest holds either the old or the complete new set.
    """
    dest = Path(dest)
    parent = dest.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{dest.name}-", dir=parent))
    except OSError as e:
        raise OSError(f"{dest}: cannot create output directory ({e})") from e

    try:
        for relative, content in files.items():
            path = staging / relative
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(content, encoding="utf-8")
        backup = None
        if dest.exists():
            backup = Path(tempfile.mkdtemp(prefix=f".{dest.name}-old-", dir=parent))
            backup.rmdir()
            os.replace(dest, backup)
        os.replace(staging, dest)
        if backup is not None:
            shutil.rmtree(backup, ignore_errors=True)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise OSError(f"{dest}: {e}") from e


def run_files(records: Sequence[RunRecord], policies: Sequence[str]) -> Dict[str, str]:
    files = {}
    for policy in policies:
        lines = []
        for record in records:
            if record.policy == policy:
                lines.extend(record.jsonl_lines())
        files[f"runs/{policy}.jsonl"] = "".join(line + "\n" for line in lines)
    return files


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    policies: Optional[Sequence[str]] = None,
    backend: str = "scripted",
    jobs: Optional[int] = None,
) -> MetricsReport:
    """
    Full experiment: corpus, paired injections, every policy, metrics.

    Writes corpus.json, config.lock.json, runs/<policy>.jsonl, report.json
    and report.csv into out_dir (default cfg.output_dir).
    """
    check_backend_environment(backend)
    seed = cfg.master_seed if seed is None else seed
    policies = list(policies or cfg.policies)
    for name in policies:
        parse_policy(name, cfg)
    if seed != cfg.master_seed or policies != list(cfg.policies):
        cfg = cfg.model_copy(update={"master_seed": seed, "policies": policies})

    corpus = build_corpus(cfg, seed)
    world = make_world(cfg, seed, corpus)
    items = plan_work(world, cfg, policies)
    logger.info(
        f"Running {len(corpus.tasks)} tasks x {cfg.repeats} repeats x {len(policies)} policies "
        f"({len(items)} executions)"
    )
    records = execute_work(items, cfg, seed, corpus, backend, jobs)
    report = compute_report(records, seed)
    logger.info(f"Injected {report.injected} of {report.instances} instances")
    for name, metrics in report.policies.items():
        logger.info(f"{name}: TSR={metrics.tsr:.4f} FDA={metrics.fda.accuracy:.4f} RSR={metrics.rsr}")

    files = {
        "corpus.json": corpus.to_json(),
        "config.lock.json": cfg.to_json(),
        "report.json": render_json(report),
        "report.csv": render_csv(report),
    }
    files.update(run_files(records, policies))
    write_atomically(Path(out_dir or cfg.output_dir), files)
    return report


def load_records(runs_dir: str) -> List[RunRecord]:
    """Rebuild records from the summary lines of runs/*.jsonl."""
    root = Path(runs_dir)
    if (root / "runs").is_dir():
        root = root / "runs"
    paths = sorted(root.glob("*.jsonl"))
    if not paths:
        raise ConfigError(f"{runs_dir}: no runs/*.jsonl files")
    records = []
    for path in paths:
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{number}: invalid JSON ({e})") from e
            if event.get("kind") == "summary":
                records.append(RunRecord.model_validate(event["payload"]))
    return records


def labeled_runs(cfg: ExperimentConfig, seed: int, corpus: Optional[Corpus] = None) -> List[LabeledRun]:
    """First K-bundle of every (task, repeat), scored and labeled with the ground truth."""
    world = make_world(cfg, seed, corpus or build_corpus(cfg, seed))
    runs = []
    for task in world.corpus.tasks:
        for repeat_index in range(cfg.repeats):
            injection = world.draw_injection(task, repeat_index)
            instance_seed = derive_seed(seed, task.id, repeat_index)
            bundle = run_k_samples(
                task, world, cfg.k, execution_seed(instance_seed, 0),
                faults=world.faults_for(injection, 0), settings=RunSettings(max_steps=cfg.max_steps),
            )
            score = evaluate_bundle(
                bundle, task, world.kb, cfg.weights_for(task.task_type), cfg.theta,
                cfg.scoring, cfg.consistency,
            )
            runs.append(LabeledRun(
                C=score.C, S=score.S, E=score.E,
                injected=injection.inject,
                succeeded=outputs_match(select_final(bundle), task.expected_output),
            ))
    return runs


def run_gridsearch(cfg: ExperimentConfig, step: float = 0.1, objective: str = "f1",
                   out_dir: Optional[str] = None, seed: Optional[int] = None) -> GridSearchResult:
    seed = cfg.master_seed if seed is None else seed
    runs = labeled_runs(cfg, seed)
    result = grid_search_weights(runs, step, objective, cfg.theta)
    logger.info(
        f"Best weights ({result.w1:.2f}, {result.w2:.2f}, {result.w3:.2f}) "
        f"{objective}={result.objective:.4f}"
    )
    if out_dir:
        write_file_atomically(Path(out_dir) / "gridsearch.json", dump_pretty(result.model_dump(mode="json")))
    return result
