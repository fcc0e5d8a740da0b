import numpy as np
import pandas as pd
import pytest

from services.errors import ReportError
from services.metrics import ScoreSet
from tests.conftest import random_head
from utils.report import RunReport, emit_report, priors_frame


def _report(rng):
    report = RunReport(
        scores=ScoreSet(rng.uniform(1, 2, size=25), rng.uniform(0, 1, size=15)),
        head=random_head(rng, num_classes=2, num_prototypes=3, dim=2),
        histogram_bins=5
    )
    report.add('accuracy', 'test', 0.9)
    return report


def test_writes_every_artefact(tmp_path, rng):
    written = emit_report(_report(rng), tmp_path / 'report')
    assert sorted(path.name for path in written) == [
        'histogram.csv', 'histogram.svg', 'metrics.csv', 'priors.csv', 'priors.svg']
    metrics = pd.read_csv(tmp_path / 'report' / 'metrics.csv')
    assert metrics.to_dict('records') == [{'metric_name': 'accuracy', 'split': 'test', 'value': 0.9}]
    histogram = pd.read_csv(tmp_path / 'report' / 'histogram.csv')
    assert histogram['id_count'].sum() == 25 and histogram['ood_count'].sum() == 15


def test_artefacts_are_deterministic(tmp_path):
    emit_report(_report(np.random.default_rng(0)), tmp_path / 'a')
    emit_report(_report(np.random.default_rng(0)), tmp_path / 'b')
    for name in ('metrics.csv', 'histogram.csv', 'histogram.svg', 'priors.svg'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()


def test_metrics_only_report(tmp_path):
    report = RunReport()
    report.add('accuracy', 'test', 1.0)
    assert [path.name for path in emit_report(report, tmp_path)] == ['metrics.csv']


def test_unwritable_directory(tmp_path, rng):
    blocker = tmp_path / 'taken'
    blocker.write_text('')
    with pytest.raises(ReportError):
        emit_report(_report(rng), blocker)


def test_priors_frame_is_long_form(rng):
    head = random_head(rng, num_classes=2, num_prototypes=3, dim=2)
    frame = priors_frame(head)
    assert len(frame) == 6
    assert frame.groupby('class_id')['prior'].sum().to_numpy() == pytest.approx([1.0, 1.0])
