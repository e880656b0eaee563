# frontend/utils/Report_Generator.py
# PDF stream report using reportlab + Plotly (kaleido for chart images)
import io
import logging

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Image, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from insight_helpers import compute_insights, summary_rows
from plot_helpers import coverage_curve, psnr_per_frame
from report_loader import progression_images

logger = logging.getLogger(__name__)


# convert plotly fig to PNG bytes (kaleido required)
def fig_to_png_bytes(fig, width=1200, height=700):
    png_bytes = fig.to_image(format="png", width=width, height=height, scale=2)
    return io.BytesIO(png_bytes)


def build_summary_table(rows):
    table = Table([["Summary Metric", "Value"]] + rows, colWidths=[180, 260])
    table.setStyle(TableStyle([
        ('BACKGROUND', (0,0), (-1,0), colors.HexColor("#0f1117")),
        ('TEXTCOLOR', (0,0), (-1,0), colors.white),
        ('ALIGN', (0,0), (-1,-1), 'LEFT'),
        ('FONTNAME', (0,0), (-1,-1), 'Helvetica'),
        ('FONTSIZE', (0,0), (-1,-1), 10),
        ('BACKGROUND', (0,1), (-1,-1), colors.HexColor("#1a1d26")),
        ('TEXTCOLOR', (0,1), (-1,-1), colors.white),
        ('BOX', (0,0), (-1,-1), 1, colors.gray),
        ('GRID', (0,0), (-1,-1), 0.3, colors.gray)
    ]))
    return table


def _chart(story, styles, heading, fig):
    try:
        png = fig_to_png_bytes(fig)
    except Exception as e:
        # kaleido missing or broken: keep the report, drop the chart
        logger.warning("Skipping chart '%s': %s", heading, e)
        return
    story.append(Paragraph(f"<b>{heading}</b>", styles["Heading2"]))
    story.append(Spacer(1, 6))
    story.append(Image(png, width=460, height=270))
    story.append(Spacer(1, 24))


def generate_pdf_report(report, include_charts=True):
    metrics, coverage, meta = report["metrics"], report["coverage"], report.get("meta", {})
    insights = compute_insights(metrics, coverage)

    buffer = io.BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=A4)
    styles = getSampleStyleSheet()
    story = []

    story.append(Paragraph("<b>CanonFuse — Stream Report</b>", styles["Title"]))
    subtitle = f"render {meta.get('render_mode', '?')} · context {meta.get('context_mode', '?')}"
    story.append(Paragraph(subtitle, styles["Heading3"]))
    if meta.get("config_hash"):
        story.append(Paragraph(f"config {meta['config_hash'][:16]}", styles["Normal"]))
    story.append(Spacer(1, 15))

    story.append(Paragraph("<b>Summary</b>", styles["Heading2"]))
    story.append(Spacer(1, 6))
    story.append(build_summary_table(summary_rows(insights)))
    story.append(Spacer(1, 24))

    if include_charts:
        if metrics["gt_available"].any():
            _chart(story, styles, "Masked PSNR per frame", psnr_per_frame(metrics))
        _chart(story, styles, "Canonical coverage", coverage_curve(coverage))

    strip = progression_images(report.get("dir"))
    if strip:
        story.append(Paragraph("<b>Canonical progression</b>", styles["Heading2"]))
        story.append(Spacer(1, 6))
        cells = [Image(str(p), width=80, height=80) for p in strip[:6]]
        story.append(Table([cells]))
        story.append(Spacer(1, 24))

    story.append(Spacer(1, 18))
    story.append(Paragraph("<i>Generated automatically by CanonFuse</i>", styles["Italic"]))

    doc.build(story)
    pdf_bytes = buffer.getvalue()
    buffer.close()
    return pdf_bytes
