"""SH interpolation baseline and unknown-direction error reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .sh import DEFAULT_COND_THRESHOLD, SphericalGrid
from .sphconv import mapping_block


class NoMatchingDirections(ValueError):
    def __init__(self, phi_target: float, tolerance: float, nearest_phi: float):
        self.phi_target = phi_target
        self.tolerance = tolerance
        self.nearest_phi = nearest_phi
        super().__init__(
            f"no direction within {tolerance:g} rad of phi={phi_target:g}; nearest available phi={nearest_phi:.6g}"
        )


def sh_baseline(H_known, known: SphericalGrid, order: int, dense: SphericalGrid,
                threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Least-squares SH fit on the known directions, evaluated on ``dense``."""
    return mapping_block(H_known, known, dense, order, threshold)


def _unknown_rows(H_hat, H_true, unknown):
    H_hat = np.asarray(H_hat, dtype=np.float64)
    H_true = np.asarray(H_true, dtype=np.float64)
    if H_hat.shape != H_true.shape:
        raise ValueError(f"shape mismatch: {H_hat.shape} vs {H_true.shape}")
    unknown = np.asarray(unknown, dtype=np.intp)
    if unknown.size == 0:
        raise ValueError("the unknown direction set is empty")
    return H_hat[unknown] - H_true[unknown]


def eval_unknown(H_hat, H_true, unknown) -> float:
    """LSD restricted to the rows listed in ``unknown``."""
    err = _unknown_rows(H_hat, H_true, unknown)
    return float(np.sqrt(np.mean(err ** 2)))


def lsd_per_frequency(H_hat, H_true, unknown) -> np.ndarray:
    """Spatial RMS error over unknown directions, one value per frequency bin."""
    err = _unknown_rows(H_hat, H_true, unknown)
    return np.sqrt(np.mean(err ** 2, axis=0))


def _wrap(angle):
    return (np.asarray(angle) + math.pi) % (2 * math.pi) - math.pi


def export_slice(values, grid: SphericalGrid, freqs, phi_target: float = math.pi,
                 tolerance: float = 0.1) -> np.ndarray:
    """Rows (theta, frequency, dB) for directions with azimuth near ``phi_target``.

    Directions are sorted by elevation; values are copied, not resampled.
    """
    values = np.asarray(values, dtype=np.float64)
    freqs = np.asarray(getattr(freqs, "values", freqs), dtype=np.float64)
    dphi = np.abs(_wrap(grid.phi - phi_target))
    match = np.flatnonzero(dphi <= tolerance)
    if match.size == 0:
        raise NoMatchingDirections(phi_target, tolerance, float(grid.phi[np.argmin(dphi)]))
    match = match[np.argsort(grid.theta[match], kind="stable")]
    L = freqs.size
    rows = np.empty((match.size * L, 3))
    rows[:, 0] = np.repeat(grid.theta[match], L)
    rows[:, 1] = np.tile(freqs, match.size)
    rows[:, 2] = values[match].reshape(-1)
    return rows


@dataclass
class EvalReport:
    method_label: str
    per_subject_lsd: Dict[str, float]
    per_frequency_lsd: np.ndarray
    frequencies: np.ndarray
    config: dict = field(default_factory=dict)
    slice_rows: Optional[np.ndarray] = None
    slice_label: str = ""

    @property
    def mean_lsd(self) -> float:
        return float(np.mean(list(self.per_subject_lsd.values())))

    @property
    def pooled_lsd(self) -> float:
        """RMS over bins of the per-frequency curve: the LSD of all pooled errors."""
        return float(np.sqrt(np.mean(self.per_frequency_lsd ** 2)))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["sample\tlsd_db"] + [f"{k}\t{v!r}" for k, v in self.per_subject_lsd.items()]
        (out / "per_subject.tsv").write_text("\n".join(lines) + "\n")
        lines = ["frequency_hz\tlsd_db"] + [
            f"{f!r}\t{v!r}" for f, v in zip(self.frequencies.tolist(), self.per_frequency_lsd.tolist())
        ]
        (out / "per_frequency.tsv").write_text("\n".join(lines) + "\n")
        if self.slice_rows is not None:
            lines = ["theta_rad\tfrequency_hz\tdb"] + [
                "\t".join(repr(x) for x in row) for row in self.slice_rows.tolist()
            ]
            (out / "slice.tsv").write_text("\n".join(lines) + "\n")
        summary = {
            "method_label": self.method_label,
            "mean_lsd_db": self.mean_lsd,
            "pooled_lsd_db": self.pooled_lsd,
            "n_samples": len(self.per_subject_lsd),
            "per_subject_lsd_db": self.per_subject_lsd,
            "slice": self.slice_label,
            "config": self.config,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def build_report(method_label: str, predictions: Dict[str, np.ndarray], truths: Dict[str, np.ndarray],
                 unknown, frequencies, config: Optional[dict] = None) -> EvalReport:
    """Per-sample unknown-direction LSD plus the pooled per-frequency curve."""
    if not predictions:
        raise ValueError("nothing to evaluate")
    per_sample = {k: eval_unknown(predictions[k], truths[k], unknown) for k in predictions}
    sq = np.mean([lsd_per_frequency(predictions[k], truths[k], unknown) ** 2 for k in predictions], axis=0)
    return EvalReport(method_label, per_sample, np.sqrt(sq), np.asarray(frequencies, dtype=np.float64),
                      dict(config or {}))
