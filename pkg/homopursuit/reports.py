"""
Report Writer - JSON, CSV and Excel output of experiments and evaluations
"""
import json
from pathlib import Path
from typing import Dict, List, Optional, Union
import logging

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from homopursuit.simlab import ExperimentRecord
from homopursuit.storage import FLOAT_FORMAT

logger = logging.getLogger(__name__)

RANK_COLUMNS = ["n", "m", "setting", "prop_correct", "reps", "failures"]
RATE_COLUMNS = [
    "n", "m", "setting",
    "neg_log_err_B", "neg_log_err_C", "neg_log_err_R", "hetero_neg_log_err_B",
    "reps", "failures",
]
SLOPE_COLUMNS = ["setting", "axis", "metric", "slope"]
METRIC_COLUMNS = [
    "total_error",
    "per_individual_avg",
    "proj_error_C",
    "proj_error_R",
    "aligned_distance_sq",
    "distance_is_upper_bound",
    "alignment_converged",
    "test_rmse",
]


def summary_columns(kind: str) -> List[str]:
    return RANK_COLUMNS if kind == "rank" else RATE_COLUMNS


class ReportWriter:
    """Write experiment records and evaluation metrics into an output directory"""

    def __init__(self, output_dir: Union[str, Path] = "results"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_experiment(self, record: ExperimentRecord, fmt: str = "all") -> Dict[str, str]:
        """JSON records plus CSV summaries always; Excel for fmt excel or all"""
        paths = {"json": self.generate_json(record), "csv": self.generate_csv(record)}
        if record.slopes:
            paths["slopes"] = self.generate_slopes_csv(record)
        if fmt in ("excel", "all"):
            paths["excel"] = self.generate_excel(record)
        logger.info(f"Generated reports: {paths}")
        return paths

    def generate_json(self, record: ExperimentRecord, filename: str = "records.json") -> str:
        filepath = self.output_dir / filename
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(record.to_dict(), f, indent=2, ensure_ascii=False)
        logger.info(f"JSON records saved: {filepath}")
        return str(filepath)

    def generate_csv(self, record: ExperimentRecord, filename: str = "summary.csv") -> str:
        filepath = self.output_dir / filename
        df = pd.DataFrame(record.summary, columns=summary_columns(record.kind))
        df.to_csv(filepath, index=False, float_format=FLOAT_FORMAT)
        logger.info(f"CSV summary saved: {filepath}")
        return str(filepath)

    def generate_slopes_csv(self, record: ExperimentRecord, filename: str = "slopes.csv") -> str:
        filepath = self.output_dir / filename
        pd.DataFrame(record.slopes, columns=SLOPE_COLUMNS).to_csv(
            filepath, index=False, float_format=FLOAT_FORMAT
        )
        return str(filepath)

    def write_metrics(self, metrics: dict, filename: str = "metrics.csv") -> str:
        filepath = self.output_dir / filename
        pd.DataFrame([metrics], columns=METRIC_COLUMNS).to_csv(
            filepath, index=False, float_format=FLOAT_FORMAT
        )
        logger.info(f"Metrics saved: {filepath}")
        return str(filepath)

    def write_json(self, payload: dict, filename: str) -> str:
        filepath = self.output_dir / filename
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, ensure_ascii=False)
        return str(filepath)

    def generate_excel(self, record: ExperimentRecord, filename: str = "summary.xlsx") -> str:
        """Summary and raw replications as two styled sheets"""
        filepath = self.output_dir / filename
        wb = Workbook()

        header_font = Font(bold=True, color="FFFFFF")
        header_fill = PatternFill("solid", fgColor="2F5496")
        failed_fill = PatternFill("solid", fgColor="FFC7CE")
        border = Border(
            left=Side(style="thin"),
            right=Side(style="thin"),
            top=Side(style="thin"),
            bottom=Side(style="thin"),
        )

        def header(ws, columns):
            for col_idx, name in enumerate(columns, 1):
                cell = ws.cell(row=1, column=col_idx, value=name)
                cell.font = header_font
                cell.fill = header_fill
                cell.alignment = Alignment(horizontal="center")
                cell.border = border
                ws.column_dimensions[get_column_letter(col_idx)].width = 18

        ws_summary = wb.active
        ws_summary.title = "Podsumowanie"
        columns = summary_columns(record.kind)
        header(ws_summary, columns)
        for row_idx, row in enumerate(record.summary, 2):
            for col_idx, name in enumerate(columns, 1):
                cell = ws_summary.cell(row=row_idx, column=col_idx, value=row.get(name))
                cell.border = border
                if name == "failures" and row.get(name):
                    cell.fill = failed_fill

        ws_records = wb.create_sheet("Replikacje")
        record_columns = _record_columns(record.records)
        header(ws_records, record_columns)
        for row_idx, row in enumerate(record.records, 2):
            for col_idx, name in enumerate(record_columns, 1):
                cell = ws_records.cell(row=row_idx, column=col_idx, value=_cell_value(row.get(name)))
                cell.border = border
                if row.get("error"):
                    cell.fill = failed_fill

        if record.slopes:
            ws_slopes = wb.create_sheet("Nachylenia")
            header(ws_slopes, SLOPE_COLUMNS)
            for row_idx, row in enumerate(record.slopes, 2):
                for col_idx, name in enumerate(SLOPE_COLUMNS, 1):
                    ws_slopes.cell(row=row_idx, column=col_idx, value=row.get(name)).border = border

        wb.save(filepath)
        logger.info(f"Excel report saved: {filepath}")
        return str(filepath)


def _record_columns(records: List[dict]) -> List[str]:
    columns: List[str] = []
    for row in records:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns


def _cell_value(value) -> Optional[Union[str, float, int, bool]]:
    # Excel stores numbers as doubles; 64-bit seeds go in as text
    if isinstance(value, int) and not isinstance(value, bool) and abs(value) >= 2 ** 53:
        return str(value)
    return value
