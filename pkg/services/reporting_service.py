import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from services.errors import ConfigError

logger = logging.getLogger(__name__)


# ---- Helpers for report storage dirs ----

def ensure_reports_dir(out) -> Path:
    """Create the output directory (and parents) or raise ConfigError."""
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        marker = path / ".write_test"
        marker.write_text("ok", encoding="utf-8")
        marker.unlink(missing_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from exc
    return path


def format_cell(value) -> str:
    """17 significant digits for floats; empty cell for None."""
    if isinstance(value, np.generic):
        value = value.item()
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".17g")
    if isinstance(value, (list, tuple)):
        return " ".join(format_cell(v) for v in value)
    return str(value)


# ---- CSV / JSON ----


def write_table(rows: list[dict], columns: list[str], path) -> Path:
    """
    Write rows (dicts keyed by column name) under a header row.
    Missing keys become empty cells; extra keys are ignored.
    """
    path = Path(path)
    ensure_reports_dir(path.parent)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_cell(row.get(c)) for c in columns])
    logger.debug("[report] wrote %d row(s) to %s", len(rows), path)
    return path


def read_table(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_summary_json(summary: dict, path) -> Path:
    path = Path(path)
    ensure_reports_dir(path.parent)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---- PDF ----


def generate_summary_pdf(title: str, rows: list[dict], columns: list[str], pdf_path,
                         notes: list[str] | None = None) -> str:
    """
    Render a one-table PDF summary of a recipe run.
    Returns the one-line summary text drawn under the header.
    """
    from reportlab.lib.pagesizes import A4 as _A4
    from reportlab.pdfgen import canvas as _canvas

    pdf_path = Path(pdf_path)
    ensure_reports_dir(pdf_path.parent)
    c = _canvas.Canvas(str(pdf_path), pagesize=_A4, invariant=1)
    width, height = _A4

    margin = 50
    y = height - margin

    # Header
    c.setFont("Helvetica-Bold", 16)
    c.drawString(margin, y, title)
    y -= 10
    c.line(margin, y, width - margin, y)
    y -= 20

    # Summary
    failed = sum(1 for r in rows if str(r.get("status", "ok")) not in ("ok", "passed", "true"))
    summary_text = f"{len(rows)} point(s), {failed} not ok"
    c.setFont("Helvetica-Bold", 11)
    c.drawString(margin, y, f"Summary: {summary_text}.")
    y -= 16
    c.setFont("Helvetica", 9)
    for note in notes or []:
        c.drawString(margin, y, note)
        y -= 12
    y -= 6

    # Table header
    step = (width - 2 * margin) / max(len(columns), 1)
    col_x = [margin + i * step for i in range(len(columns))]

    def header_row(y):
        c.setFont("Helvetica-Bold", 9)
        for x, h in zip(col_x, columns):
            c.drawString(x, y, h[:16])
        y -= 14
        c.line(margin, y + 10, width - margin, y + 10)
        c.setFont("Helvetica", 8)
        return y

    y = header_row(y)
    for row in rows:
        if y < 60:
            c.showPage()
            y = header_row(height - margin)
        for x, col in zip(col_x, columns):
            value = row.get(col)
            text = f"{value:.4g}" if isinstance(value, float) else format_cell(value)
            c.drawString(x, y, text[:18])
        y -= 11

    c.save()
    logger.info("[report] %s: %s", pdf_path.name, summary_text)
    return summary_text
