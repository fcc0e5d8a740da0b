"""Report artefacts: metrics, score histogram and priors as CSV plus SVG plots."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from services.density import ModelHead  # noqa: E402
from services.errors import ReportError  # noqa: E402
from services.metrics import ScoreSet, score_histogram  # noqa: E402

logger = logging.getLogger(__name__)

SVG_HASH_SALT = 'mgproto'
METRIC_COLUMNS = ['metric_name', 'split', 'value']


@dataclass
class RunReport:
    metrics: List[dict] = field(default_factory=list)
    scores: Optional[ScoreSet] = None
    head: Optional[ModelHead] = None
    histogram_bins: int = 20

    def add(self, metric_name: str, split: str, value: float) -> None:
        self.metrics.append({'metric_name': metric_name, 'split': split, 'value': float(value)})

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics, columns=METRIC_COLUMNS)


def priors_frame(head: ModelHead) -> pd.DataFrame:
    rows = [
        {'class_id': mix.class_id, 'prototype': m, 'prior': float(prior)}
        for mix in head.classes for m, prior in enumerate(mix.priors)
    ]
    return pd.DataFrame(rows, columns=['class_id', 'prototype', 'prior'])


def _save_svg(fig, path: Path) -> None:
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT}):
        fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)


def _plot_histogram(histogram: pd.DataFrame, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = histogram['bin_right'] - histogram['bin_left']
    ax.bar(histogram['bin_left'], histogram['id_count'], width=widths, align='edge',
           alpha=0.6, label='in-distribution')
    ax.bar(histogram['bin_left'], histogram['ood_count'], width=widths, align='edge',
           alpha=0.6, label='out-of-distribution')
    ax.set_xlabel('p(x)')
    ax.set_ylabel('count')
    ax.legend()
    _save_svg(fig, path)


def _plot_priors(priors: pd.DataFrame, path: Path) -> None:
    classes = priors['class_id'].unique()
    fig, axes = plt.subplots(len(classes), 1, figsize=(6, 1.6 * len(classes)), squeeze=False)
    for ax, class_id in zip(axes[:, 0], classes):
        rows = priors[priors['class_id'] == class_id]
        ax.bar(rows['prototype'], rows['prior'])
        ax.set_ylabel(f'class {class_id}')
    axes[-1, 0].set_xlabel('prototype')
    _save_svg(fig, path)


def emit_report(report: RunReport, out_dir: Path) -> List[Path]:
    """Write every artefact the report holds; returns the written paths"""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / 'metrics.csv']
        report.metrics_frame().to_csv(written[0], index=False)

        if report.scores is not None:
            histogram = score_histogram(report.scores, report.histogram_bins)
            histogram.to_csv(out_dir / 'histogram.csv', index=False)
            _plot_histogram(histogram, out_dir / 'histogram.svg')
            written += [out_dir / 'histogram.csv', out_dir / 'histogram.svg']

        if report.head is not None:
            priors = priors_frame(report.head)
            priors.to_csv(out_dir / 'priors.csv', index=False)
            _plot_priors(priors, out_dir / 'priors.svg')
            written += [out_dir / 'priors.csv', out_dir / 'priors.svg']
    except OSError as error:
        raise ReportError(f"cannot write report to {out_dir}: {error}") from error

    logger.info("Wrote %d report files to %s", len(written), out_dir)
    return written
