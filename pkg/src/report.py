"""
Metrics report
Report model plus JSON, CSV and PDF emission.
"""
import csv
import io
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from src.errors import ConfigError
from src.models import TaskType
from src.stats import WilcoxonResult

logger = logging.getLogger(__name__)

CLEAN = "clean"
UNDETECTED = "none"
CSV_METRICS = ("tsr", "fda", "rsr", "eo")
CSV_HEADER = ("policy", "task_type", "metric", "value")
FORMATS = ("json", "csv", "pdf")


class TypeScores(BaseModel):
    model_config = ConfigDict(frozen=True)

    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None


class FDAResult(BaseModel):
    """Detection accuracy, per-type classification scores and the confusion matrix."""

    model_config = ConfigDict(frozen=True)

    accuracy: float
    true_detections: int
    true_negatives: int
    false_alarms: int
    missed: int
    per_type: Dict[str, TypeScores] = Field(default_factory=dict)
    # injected type (or "clean") -> predicted type (or "none") -> count
    confusion: Dict[str, Dict[str, int]] = Field(default_factory=dict)


class SliceMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    records: int
    tsr: float
    fda: float
    rsr: Optional[float] = None
    eo: Optional[float] = None


class PolicyMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    records: int
    tsr: float
    fda: FDAResult
    rsr: Optional[float] = None
    detected: int = 0
    eo: Optional[float] = None
    # wall-clock overhead: measured, differs from run to run
    eo_wall_measured: Optional[float] = None
    healing_actions: int = 0
    by_task_type: Dict[str, SliceMetrics] = Field(default_factory=dict)


class Comparison(BaseModel):
    model_config = ConfigDict(frozen=True)

    baseline: str
    quantity: str
    test: WilcoxonResult


class MetricsReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    master_seed: int
    instances: int
    injected: int
    policies: Dict[str, PolicyMetrics] = Field(default_factory=dict)
    comparisons: List[Comparison] = Field(default_factory=list)


def dump_pretty(value: Any) -> str:
    return json.dumps(value, sort_keys=True, indent=2) + "\n"


def render_json(report: MetricsReport) -> str:
    return dump_pretty(report.model_dump(mode="json"))


def _cell(value: Optional[float]) -> str:
    # N/A metrics (no detections, no baseline) stay empty
    return "" if value is None else repr(float(value))


def csv_rows(report: MetricsReport) -> List[List[str]]:
    rows = []
    for policy in sorted(report.policies):
        metrics = report.policies[policy]
        for task_type in TaskType:
            part = metrics.by_task_type.get(task_type.value)
            if part is None:
                continue
            for metric in CSV_METRICS:
                rows.append([policy, task_type.value, metric, _cell(getattr(part, metric))])
    return rows


def render_csv(report: MetricsReport) -> str:
    """One row per (policy, task type, metric)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(csv_rows(report))
    return buffer.getvalue()


class ReportPDFGenerator:
    """Render a MetricsReport as a printable PDF."""

    def __init__(self):
        self.styles = getSampleStyleSheet()
        self._setup_styles()

    def _setup_styles(self):
        self.styles.add(ParagraphStyle(
            name='Header',
            parent=self.styles['Heading1'],
            alignment=TA_CENTER,
            fontSize=14,
            spaceAfter=20
        ))
        self.styles.add(ParagraphStyle(
            name='Section',
            parent=self.styles['Heading2'],
            fontSize=12,
            spaceBefore=12,
            spaceAfter=8
        ))

    @staticmethod
    def _table(rows: List[List[str]]) -> Table:
        table = Table(rows, hAlign='LEFT')
        table.setStyle(TableStyle([
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 9),
            ('BACKGROUND', (0, 0), (-1, 0), colors.lightgrey),
            ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
        ]))
        return table

    def generate_document(self, report: MetricsReport, generated_at: Optional[datetime] = None) -> BytesIO:
        buffer = BytesIO()
        doc = SimpleDocTemplate(
            buffer,
            pagesize=letter,
            rightMargin=inch,
            leftMargin=inch,
            topMargin=inch,
            bottomMargin=inch
        )
        stamp = (generated_at or datetime.now(timezone.utc)).strftime("%Y-%m-%d %H:%M UTC")

        story = [
            Paragraph("<b>Self-healing runtime: experiment report</b>", self.styles['Header']),
            Paragraph(
                f"Seed {report.master_seed} - {report.instances} instances, "
                f"{report.injected} injected - generated {stamp}",
                self.styles['Normal'],
            ),
            Spacer(1, 15),
            Paragraph("Policies", self.styles['Section']),
        ]

        rows = [["policy", "records", "TSR", "FDA", "RSR", "EO", "healing"]]
        for name in sorted(report.policies):
            m = report.policies[name]
            rows.append([
                name, str(m.records), f"{m.tsr:.4f}", f"{m.fda.accuracy:.4f}",
                "n/a" if m.rsr is None else f"{m.rsr:.4f}",
                "n/a" if m.eo is None else f"{m.eo:+.4f}",
                str(m.healing_actions),
            ])
        story.append(self._table(rows))

        if report.comparisons:
            story.append(Paragraph("Wilcoxon signed-rank (proposed vs baseline)", self.styles['Section']))
            rows = [["baseline", "quantity", "W", "n", "p", "method"]]
            for comparison in report.comparisons:
                test = comparison.test
                rows.append([
                    comparison.baseline, comparison.quantity, f"{test.W:g}", str(test.n),
                    f"{test.p_value:.4g}", test.method + (" (degenerate)" if test.degenerate else ""),
                ])
            story.append(self._table(rows))

        for name in sorted(report.policies):
            confusion = report.policies[name].fda.confusion
            if not confusion:
                continue
            story.append(Paragraph(f"Confusion matrix: {name}", self.styles['Section']))
            columns = list(next(iter(confusion.values())).keys())
            rows = [["injected \\ classified"] + columns]
            rows.extend([row] + [str(confusion[row][col]) for col in columns] for row in confusion)
            story.append(self._table(rows))

        doc.build(story)
        buffer.seek(0)
        return buffer


def write_file_atomically(path: Path, content: Union[str, bytes]) -> Path:
    """Replace one file via a temp file in the same directory; siblings are left alone."""
    path = Path(path)
    data = content.encode("utf-8") if isinstance(content, str) else content
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, staging = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    except OSError as e:
        raise OSError(f"{path}: {e}") from e
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(staging, path)
    except OSError as e:
        Path(staging).unlink(missing_ok=True)
        raise OSError(f"{path}: {e}") from e
    return path


def emit_report(report: MetricsReport, fmt: str, dest: str) -> Path:
    """Write the report in one format. I/O errors name the destination."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown report format '{fmt}' (expected one of {', '.join(FORMATS)})")
    if fmt == "json":
        content = render_json(report)
    elif fmt == "csv":
        content = render_csv(report)
    else:
        content = ReportPDFGenerator().generate_document(report).getvalue()
    path = write_file_atomically(Path(dest), content)
    logger.info(f"Wrote {fmt} report to {path}")
    return path
