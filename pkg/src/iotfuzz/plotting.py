"""Figures for campaign reports.

Rendering uses the non-interactive Agg backend so reports can be produced on
headless hosts.
"""

from __future__ import annotations

import logging
from os import PathLike

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from iotfuzz.assessor import FuzzReport, VerdictClass  # noqa: E402

log = logging.getLogger(__name__)

CLASS_COLORS = {
    VerdictClass.VALID: "#2a9d8f",
    VerdictClass.INVALID: "#e76f51",
    VerdictClass.MALFORMED_REJECTED: "#f4a261",
    VerdictClass.NO_RESPONSE: "#8d99ae",
}


def campaign_figure(report: FuzzReport):
    """Verdict counts on the left, the valid/invalid coverage split on the right."""
    fig, (ax_counts, ax_cov) = plt.subplots(1, 2, figsize=(9, 3.6),
                                            gridspec_kw={"width_ratios": [3, 2]})
    counts = [report.valid, report.invalid, report.malformed_rejected, report.no_response]
    labels = ["valid", "invalid", "malformed\nrejected", "no\nresponse"]
    bars = ax_counts.bar(labels, counts, color=[CLASS_COLORS[c] for c in VerdictClass])
    for bar, n in zip(bars, counts):
        ax_counts.annotate(str(n), (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                           ha="center", va="bottom", fontsize=9)
    ax_counts.set_ylabel("mutants")
    ax_counts.set_title(f"{report.vuln_id}: {report.sent} sent")
    ax_counts.spines[["top", "right"]].set_visible(False)

    ax_cov.barh([0], [report.coverage_valid_pct], color=CLASS_COLORS[VerdictClass.VALID],
                label=f"valid {report.coverage_valid_pct}%")
    ax_cov.barh([0], [report.coverage_invalid_pct], left=[report.coverage_valid_pct],
                color=CLASS_COLORS[VerdictClass.INVALID],
                label=f"invalid {report.coverage_invalid_pct}%")
    ax_cov.set_xlim(0, 100)
    ax_cov.set_yticks([])
    ax_cov.set_xlabel("response coverage (%)")
    ax_cov.legend(loc="upper center", bbox_to_anchor=(0.5, -0.3), ncol=2, frameon=False)
    fig.tight_layout()
    return fig


def save_campaign_figure(report: FuzzReport, path: str | PathLike) -> None:
    fig = campaign_figure(report)
    try:
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    log.info("wrote figure %s", path)
