"""
CSV, JSON and SVG writers for run traces, sweeps and verification reports.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from proxfed.processors.engine import RESIDUAL_NAMES, TraceLog

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    't', 'eta', 'eps_budget', 'eps_max', 'grad_sq', 'moreau_sq', 'step_norm',
    *RESIDUAL_NAMES,
    'sampled_devices',
]

SWEEP_COLUMNS = ['value', 'T', 'I', 'b', 'eta', 'metric']

FLOAT_FORMAT = '%.17g'


def trace_frame(trace: TraceLog) -> pd.DataFrame:
    """One row per round in TRACE_COLUMNS order; None becomes an empty cell."""
    rows = []
    for r in trace.records:
        row = {
            't': r.t,
            'eta': r.eta,
            'eps_budget': r.eps_budget,
            'eps_max': r.eps_certified_max,
            'grad_sq': r.global_grad_sq,
            'moreau_sq': r.moreau_grad_sq,
            'step_norm': r.step_norm,
        }
        for name in RESIDUAL_NAMES:
            row[name] = r.invariant_residuals.get(name)
        row['sampled_devices'] = ';'.join(str(m) for m in sorted(r.sampled_devices))
        rows.append(row)
    frame = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    for column in TRACE_COLUMNS[1:-1]:
        frame[column] = pd.to_numeric(frame[column], errors='coerce').astype('float64')
    return frame


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


class TraceExporter:
    """Write experiment outputs into one directory."""

    def __init__(self, output_dir: str):
        """
        Initialize the exporter.

        Args:
            output_dir: Directory for all output files (created on demand)
        """
        self.output_dir = Path(output_dir)

    def _path(self, name: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name

    def export_trace(self, trace: TraceLog, name: str = 'trace.csv') -> bool:
        """
        Write the round trace as CSV.

        Returns:
            True if successful, False otherwise
        """
        try:
            path = self._path(name)
            trace_frame(trace).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep='')
            logger.info(f"Wrote {len(trace.records)} rounds to {path}")
            return True
        except Exception as e:
            logger.error(f"Error writing trace: {e}")
            return False

    def export_json(self, payload: Dict, name: str) -> bool:
        """
        Write a JSON document (summary, lgd, verify or stability report).

        Returns:
            True if successful, False otherwise
        """
        try:
            path = self._path(name)
            with open(path, 'w') as f:
                json.dump(payload, f, indent=2, default=_json_default)
            logger.info(f"Wrote {path}")
            return True
        except Exception as e:
            logger.error(f"Error writing {name}: {e}")
            return False

    def export_sweep(self, rows: List[Dict], name: str = 'sweep.csv') -> bool:
        """
        Write sweep results with columns value, T, I, b, eta, metric.

        Returns:
            True if successful, False otherwise
        """
        try:
            path = self._path(name)
            pd.DataFrame(rows, columns=SWEEP_COLUMNS).to_csv(
                path, index=False, float_format=FLOAT_FORMAT, na_rep='')
            logger.info(f"Wrote {len(rows)} sweep rows to {path}")
            return True
        except Exception as e:
            logger.error(f"Error writing sweep: {e}")
            return False

    def export_svg(self, series: Dict[str, Sequence[float]], name: str, title: str = '',
                   log_y: bool = True, x_values: Optional[Sequence[float]] = None,
                   log_x: bool = False) -> bool:
        """
        Write a line chart as SVG.

        Args:
            series: Label -> y values (non-finite or non-positive points on a log
                axis are skipped)
            name: File name
            title: Chart title
            log_y: Logarithmic y axis
            x_values: Shared x values (1..n by default)
            log_x: Logarithmic x axis

        Returns:
            True if successful, False otherwise
        """
        try:
            svg = render_line_chart(series, title, log_y, x_values, log_x)
            path = self._path(name)
            path.write_text(svg)
            logger.info(f"Wrote {path}")
            return True
        except Exception as e:
            logger.error(f"Error writing {name}: {e}")
            return False


COLORS = ['#1f77b4', '#d62728', '#2ca02c', '#9467bd', '#ff7f0e']


def render_line_chart(series: Dict[str, Sequence[float]], title: str = '', log_y: bool = True,
                      x_values: Optional[Sequence[float]] = None, log_x: bool = False,
                      width: int = 640, height: int = 400) -> str:
    """Render series as a minimal SVG polyline chart."""
    margin = 50
    points = {}
    for label, values in series.items():
        ys = np.asarray(values, dtype=np.float64)
        xs = np.arange(1, len(ys) + 1, dtype=np.float64) if x_values is None \
            else np.asarray(x_values, dtype=np.float64)
        keep = np.isfinite(ys) & np.isfinite(xs)
        if log_y:
            keep &= ys > 0
        if log_x:
            keep &= xs > 0
        xs, ys = xs[keep], ys[keep]
        points[label] = (np.log10(xs) if log_x else xs, np.log10(ys) if log_y else ys)

    all_x = np.concatenate([p[0] for p in points.values()]) if points else np.array([])
    all_y = np.concatenate([p[1] for p in points.values()]) if points else np.array([])
    x_lo, x_hi = (all_x.min(), all_x.max()) if all_x.size else (0.0, 1.0)
    y_lo, y_hi = (all_y.min(), all_y.max()) if all_y.size else (0.0, 1.0)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 15}" font-size="10">{_tick(x_lo, log_x)}</text>',
        f'<text x="{width - margin}" y="{height - margin + 15}" font-size="10" text-anchor="end">{_tick(x_hi, log_x)}</text>',
        f'<text x="5" y="{height - margin}" font-size="10">{_tick(y_lo, log_y)}</text>',
        f'<text x="5" y="{margin}" font-size="10">{_tick(y_hi, log_y)}</text>',
    ]
    for k, (label, (xs, ys)) in enumerate(points.items()):
        color = COLORS[k % len(COLORS)]
        coords = ' '.join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{width - margin}" y="{margin + 15 * k}" font-size="11" '
                     f'text-anchor="end" fill="{color}">{label}</text>')
    parts.append('</svg>')
    return '\n'.join(parts) + '\n'


def _tick(value: float, log: bool) -> str:
    return f"{10 ** value:.3g}" if log else f"{value:.3g}"
