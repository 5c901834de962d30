"""
Tests for trace exporter.
"""
import json
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from proxfed.exporters.trace_exporter import (
    SWEEP_COLUMNS,
    TRACE_COLUMNS,
    TraceExporter,
    render_line_chart,
    trace_frame,
)
from proxfed.processors.engine import RoundRecord, TraceLog


def make_trace() -> TraceLog:
    records = [
        RoundRecord(1, [1, 0], 0.1, 0.01, 0.005, 2.0, None, 0.3,
                    {'aggregation_residual': 0.0, 'eps_excess': -0.005}),
        RoundRecord(2, [2], 0.1, 0.01, 0.004, 1.0, None, 0.2, {}),
    ]
    iterates = [np.zeros(2), np.ones(2), 2 * np.ones(2)]
    return TraceLog(records, iterates, {'rounds': 2})


class TestTraceFrame:
    """Test cases for trace_frame."""

    def test_columns(self):
        """Test column order and row count."""
        frame = trace_frame(make_trace())
        assert list(frame.columns) == TRACE_COLUMNS
        assert len(frame) == 2

    def test_missing_values(self):
        """Test that None becomes NaN."""
        frame = trace_frame(make_trace())
        assert frame['moreau_sq'].isna().all()
        assert np.isnan(frame.loc[1, 'eps_excess'])
        assert frame.loc[0, 'eps_excess'] == pytest.approx(-0.005)

    def test_sampled_devices(self):
        """Test that devices are sorted and joined."""
        frame = trace_frame(make_trace())
        assert frame.loc[0, 'sampled_devices'] == '0;1'
        assert frame.loc[1, 'sampled_devices'] == '2'


class TestTraceExporter:
    """Test cases for TraceExporter."""

    @pytest.fixture
    def temp_dir(self):
        """Create a temporary directory."""
        temp_dir = tempfile.mkdtemp()
        yield temp_dir
        shutil.rmtree(temp_dir)

    def test_export_trace(self, temp_dir):
        """Test CSV output."""
        exporter = TraceExporter(str(Path(temp_dir) / 'out'))
        assert exporter.export_trace(make_trace())
        frame = pd.read_csv(Path(temp_dir) / 'out' / 'trace.csv', dtype={'sampled_devices': str})
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame['grad_sq'].tolist() == [2.0, 1.0]
        assert frame['sampled_devices'].tolist() == ['0;1', '2']

    def test_export_json_numpy(self, temp_dir):
        """Test that numpy values serialise."""
        exporter = TraceExporter(temp_dir)
        payload = {'w': np.array([1.0, 2.0]), 'n': np.int64(3), 'ok': np.bool_(True)}
        assert exporter.export_json(payload, 'summary.json')
        with open(Path(temp_dir) / 'summary.json') as f:
            assert json.load(f) == {'w': [1.0, 2.0], 'n': 3, 'ok': True}

    def test_export_json_unserialisable(self, temp_dir):
        """Test that an unknown type fails without raising."""
        exporter = TraceExporter(temp_dir)
        assert not exporter.export_json({'x': object()}, 'bad.json')

    def test_export_sweep(self, temp_dir):
        """Test sweep CSV output."""
        exporter = TraceExporter(temp_dir)
        rows = [{'value': 4, 'T': 4, 'I': 2, 'b': 1, 'eta': 0.1, 'metric': 0.5}]
        assert exporter.export_sweep(rows)
        frame = pd.read_csv(Path(temp_dir) / 'sweep.csv')
        assert list(frame.columns) == SWEEP_COLUMNS
        assert frame.loc[0, 'metric'] == 0.5

    def test_export_svg(self, temp_dir):
        """Test SVG output."""
        exporter = TraceExporter(temp_dir)
        assert exporter.export_svg({'grad_sq': [1.0, 0.1, 0.01]}, 'trace.svg', title='run')
        text = (Path(temp_dir) / 'trace.svg').read_text()
        assert text.startswith('<svg')
        assert '<polyline' in text


class TestRenderLineChart:
    """Test cases for render_line_chart."""

    def test_skips_non_positive_on_log_axis(self):
        """Test that zeros and NaN are dropped on a log axis."""
        svg = render_line_chart({'a': [1.0, 0.0, float('nan'), 10.0]})
        points = svg.split('points="')[1].split('"')[0].split()
        assert len(points) == 2

    def test_empty_series(self):
        """Test that no series still renders a frame."""
        svg = render_line_chart({})
        assert svg.startswith('<svg')
        assert '<polyline' not in svg
        assert svg.rstrip().endswith('</svg>')

    def test_log_x(self):
        """Test explicit x values on a log axis."""
        svg = render_line_chart({'a': [1.0, 0.1]}, x_values=[10, 100], log_x=True)
        assert '>10<' in svg
        assert '>100<' in svg
