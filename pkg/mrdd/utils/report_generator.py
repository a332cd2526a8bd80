"""
Run report generator for MRDD
Renders a finished run directory as a PDF (ReportLab) and a fingerprinted JSON report
"""

import json
import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.lib.units import inch
from reportlab.lib.colors import HexColor
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
from reportlab.lib.enums import TA_CENTER

from mrdd import __version__

logger = logging.getLogger(__name__)

TABLE_STYLE = TableStyle([
    ('BACKGROUND', (0, 0), (-1, 0), HexColor('#F7FAFC')),
    ('TEXTCOLOR', (0, 0), (-1, -1), HexColor('#2D3748')),
    ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
    ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
    ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
    ('FONTSIZE', (0, 0), (-1, -1), 9),
    ('BOTTOMPADDING', (0, 0), (-1, -1), 5),
    ('GRID', (0, 0), (-1, -1), 1, HexColor('#E2E8F0'))
])

KEY_VALUE_STYLE = TableStyle([
    ('BACKGROUND', (0, 0), (0, -1), HexColor('#F7FAFC')),
    ('TEXTCOLOR', (0, 0), (-1, -1), HexColor('#2D3748')),
    ('ALIGN', (0, 0), (-1, -1), 'LEFT'),
    ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
    ('FONTSIZE', (0, 0), (-1, -1), 9),
    ('BOTTOMPADDING', (0, 0), (-1, -1), 5),
    ('GRID', (0, 0), (-1, -1), 1, HexColor('#E2E8F0'))
])


def fingerprint(payload: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a report payload"""
    data_string = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(data_string.encode('utf-8')).hexdigest()


def format_metric(mean: float, variance: float, scale: float = 100.0) -> str:
    """Mean +/- variance in the percentage row format of the result tables"""
    return f"{mean * scale:.2f} ± {variance * scale:.2f}"


class RunReportGenerator:
    """Builds PDF and JSON reports from the summary of one run"""

    def __init__(self, reports_dir: Optional[str] = None):
        self.reports_dir = Path(reports_dir) if reports_dir else None

    def _target(self, run_data: Dict[str, Any], suffix: str) -> Path:
        reports_dir = self.reports_dir or Path(run_data.get('run_dir', '.'))
        reports_dir.mkdir(parents=True, exist_ok=True)
        return reports_dir / f"report_{run_data.get('run_id', 'run')}.{suffix}"

    def generate_pdf_report(self, run_data: Dict[str, Any]) -> str:
        try:
            filepath = self._target(run_data, "pdf")
            doc = SimpleDocTemplate(
                str(filepath),
                pagesize=A4,
                rightMargin=54,
                leftMargin=54,
                topMargin=54,
                bottomMargin=18
            )

            story = []
            styles = getSampleStyleSheet()
            title_style = ParagraphStyle(
                'RunTitle',
                parent=styles['Heading1'],
                fontSize=20,
                spaceAfter=18,
                alignment=TA_CENTER,
                textColor=HexColor('#2D3748'),
                fontName='Helvetica-Bold'
            )
            header_style = ParagraphStyle(
                'Header',
                parent=styles['Heading3'],
                fontSize=13,
                spaceAfter=10,
                textColor=HexColor('#2D3748'),
                fontName='Helvetica-Bold'
            )
            normal_style = ParagraphStyle(
                'Body',
                parent=styles['Normal'],
                fontSize=10,
                spaceAfter=6,
                textColor=HexColor('#4A5568'),
                fontName='Helvetica'
            )

            story.append(Paragraph(f"MRDD RUN REPORT: {run_data.get('name', 'run')}", title_style))
            story.append(Paragraph(f"<b>Run ID:</b> {run_data.get('run_id', 'N/A')}", normal_style))
            story.append(Paragraph(f"<b>Generated:</b> {datetime.now(timezone.utc).strftime('%Y-%m-%d %H:%M:%S UTC')}",
                                   normal_style))
            story.append(Spacer(1, 14))

            story.append(Paragraph("RUN SUMMARY", header_style))
            summary = [
                ["Status:", str(run_data.get('status', 'N/A')).upper()],
                ["Dataset:", str(run_data.get('dataset', 'N/A'))],
                ["Config hash:", str(run_data.get('config_hash', 'N/A'))[:32]],
                ["Duration:", self._format_duration(run_data.get('duration_seconds', 0))],
                ["Peak memory:", f"{run_data.get('peak_rss_mb') or 0:.0f} MB"],
            ]
            if run_data.get('failed_stage'):
                summary.append(["Failed stage:", run_data['failed_stage']])
                summary.append(["Error:", str(run_data.get('error', ''))[:80]])
            story.append(self._table(summary, [1.6 * inch, 4.6 * inch], KEY_VALUE_STYLE))
            story.append(Spacer(1, 14))

            checkpoints = run_data.get('checkpoints', {})
            if checkpoints:
                story.append(Paragraph("STAGE CHECKPOINTS", header_style))
                rows = [["Stage", "Encoder hash", "File"]]
                for stage, info in checkpoints.items():
                    rows.append([stage, str(info.get('encoder_hash', ''))[:16], Path(info.get('path', '')).name])
                story.append(self._table(rows, [1.0 * inch, 1.8 * inch, 3.4 * inch], TABLE_STYLE))
                story.append(Spacer(1, 14))

            losses = run_data.get('final_losses', {})
            if losses:
                story.append(Paragraph("FINAL EPOCH LOSSES", header_style))
                rows = [["Stage", "Epoch", "Total"]]
                for stage, record in losses.items():
                    rows.append([stage, str(record.get('epoch', '')), f"{record.get('total', float('nan')):.4f}"])
                story.append(self._table(rows, [1.6 * inch, 1.0 * inch, 1.6 * inch], TABLE_STYLE))
                story.append(Spacer(1, 14))

            metrics = run_data.get('metrics', [])
            if metrics:
                story.append(Paragraph("DOWNSTREAM METRICS (mean ± variance, %)", header_style))
                rows = [["Task", "Representation", "Metric", "Value"]]
                for m in metrics:
                    rows.append([m['task'], m['selector'], m['metric'].upper(),
                                 format_metric(m['mean'], m['variance'])])
                story.append(self._table(rows, [1.5 * inch, 1.5 * inch, 1.0 * inch, 2.0 * inch], TABLE_STYLE))
                story.append(Spacer(1, 14))

            audit = run_data.get('mi_audit', [])
            if audit:
                story.append(Paragraph("RESIDUAL REDUNDANCY I(c; s)", header_style))
                rows = [["View", "MI (nats)", "Std over repeats"]]
                for row in audit:
                    rows.append([str(row['view']), f"{row['mi_nats']:.4f}", f"{row['std']:.4f}"])
                story.append(self._table(rows, [1.0 * inch, 1.6 * inch, 1.6 * inch], TABLE_STYLE))
                story.append(Spacer(1, 14))

            story.append(Paragraph(f"<b>Payload fingerprint:</b> {fingerprint(run_data)}", normal_style))
            story.append(Spacer(1, 10))
            story.append(Paragraph(f"Generated by mrdd {__version__}",
                                   ParagraphStyle('Footer', parent=styles['Normal'],
                                                  fontSize=8, alignment=TA_CENTER,
                                                  textColor=HexColor('#718096'))))
            doc.build(story)
            logger.info(f"Generated PDF report: {filepath}")
            return str(filepath)

        except Exception as e:
            logger.error(f"Failed to generate PDF report: {e}")
            raise

    def generate_json_report(self, run_data: Dict[str, Any]) -> str:
        try:
            filepath = self._target(run_data, "json")
            report = {
                "report": {
                    "run_id": run_data.get('run_id'),
                    "version": "1.0",
                    "generated_at": datetime.now(timezone.utc).isoformat(),
                    "generator": f"mrdd {__version__}",
                },
                "run": run_data,
                "fingerprint": {
                    "algorithm": "SHA-256",
                    "value": fingerprint(run_data),
                },
            }
            with open(filepath, 'w', encoding='utf-8') as f:
                json.dump(report, f, indent=2, ensure_ascii=False, default=str)
            logger.info(f"Generated JSON report: {filepath}")
            return str(filepath)

        except Exception as e:
            logger.error(f"Failed to generate JSON report: {e}")
            raise

    def verify_report(self, filepath: str) -> Dict[str, Any]:
        """Recompute the fingerprint of a JSON report"""
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                report = json.load(f)
            expected = report["fingerprint"]["value"]
            if fingerprint(report["run"]) != expected:
                return {"valid": False, "error": "Fingerprint mismatch"}
            return {"valid": True, "message": "Report payload matches its fingerprint"}
        except Exception as e:
            return {"valid": False, "error": str(e)}

    @staticmethod
    def _table(rows: List[List[str]], widths, style) -> Table:
        table = Table(rows, colWidths=widths)
        table.setStyle(style)
        return table

    @staticmethod
    def _format_duration(seconds: float) -> str:
        if not seconds:
            return "Unknown"

        hours = int(seconds // 3600)
        minutes = int((seconds % 3600) // 60)
        secs = int(seconds % 60)

        if hours > 0:
            return f"{hours}h {minutes}m {secs}s"
        elif minutes > 0:
            return f"{minutes}m {secs}s"
        else:
            return f"{secs}s"
