"""HRTF field containers, sampling grids, synthetic subjects and field files."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .sh import (
    DEFAULT_COND_THRESHOLD,
    Y00,
    IllConditioned,
    SphericalGrid,
    build_sh_matrix,
    check_conditioning,
    n_coeffs,
    order_of_index,
    unit_vectors,
)

FIELD_FORMAT = "hrtf-field"
FIELD_VERSION = 1
EARS = ("left", "right")
DB_MIN, DB_MAX = -60.0, 20.0
DEFAULT_PROPORTIONS = (77, 10, 7)


class FieldFormatError(ValueError):
    """Malformed field file; carries the 1-based line number when known."""

    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class FrequencyAxis:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1:
            raise ValueError("frequency axis needs at least one bin")
        if np.any(np.diff(values) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def linear(cls, n_bins: int = 93, f_min: float = 172.0, f_max: float = 16000.0) -> "FrequencyAxis":
        if n_bins == 1:
            return cls([f_min])
        return cls(np.linspace(f_min, f_max, n_bins))

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        return isinstance(other, FrequencyAxis) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass
class HrtfField:
    """Magnitude spectra in dB, one row per grid direction and one column per bin."""

    values: np.ndarray
    grid: SphericalGrid
    freqs: FrequencyAxis
    subject_id: int = 0
    ear: str = "left"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.grid), len(self.freqs)):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid ({len(self.grid)}) "
                f"x frequencies ({len(self.freqs)})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        if self.ear not in EARS:
            raise ValueError(f"ear must be one of {EARS}, got {self.ear!r}")

    def subset(self, index) -> "HrtfField":
        index = np.asarray(index, dtype=np.intp)
        return HrtfField(self.values[index], self.grid.subset(index), self.freqs, self.subject_id, self.ear)

    def __eq__(self, other):
        return (isinstance(other, HrtfField) and self.grid == other.grid and self.freqs == other.freqs
                and self.subject_id == other.subject_id and self.ear == other.ear
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    validation: tuple
    test: tuple

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/validation/test subject sets must be disjoint")

    @property
    def sizes(self):
        return len(self.train), len(self.validation), len(self.test)

    def roster(self):
        return sorted(set(self.train) | set(self.validation) | set(self.test))


class KnownSplit(NamedTuple):
    known: SphericalGrid
    unknown: SphericalGrid
    known_index: np.ndarray
    unknown_index: np.ndarray


def fibonacci_grid(P: int = 480) -> SphericalGrid:
    """Spherical Fibonacci lattice with P points (elevation/azimuth)."""
    if P < 1:
        raise ValueError(f"need at least one point, got {P}")
    i = np.arange(P)
    z = 1.0 - (2.0 * i + 1.0) / P
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    phi = 2.0 * math.pi * i / golden
    return SphericalGrid(np.arcsin(z), phi)


def farthest_point_order(grid: SphericalGrid, n: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point selection of n indices from a seeded start point."""
    xyz = unit_vectors(grid.theta, grid.phi)
    start = int(np.random.default_rng(seed).integers(len(grid)))
    chosen = [start]
    dist = np.arccos(np.clip(xyz @ xyz[start], -1.0, 1.0))
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.arccos(np.clip(xyz @ xyz[nxt], -1.0, 1.0)))
    return np.array(chosen, dtype=np.intp)


def split_known(dense: SphericalGrid, n_known: int = 120, seed: int = 0, order: Optional[int] = 7,
                threshold: float = DEFAULT_COND_THRESHOLD) -> KnownSplit:
    """Pick ``n_known`` well-spread measured directions; the rest are unknown.

    Index arrays are sorted so both subsets keep the dense grid's ordering.
    When ``order`` is given, the known subset must support a least-squares
    SH fit at that order.
    """
    P = len(dense)
    if not 1 <= n_known <= P:
        raise ValueError(f"n_known must be in [1, {P}], got {n_known}")
    known_idx = np.sort(farthest_point_order(dense, n_known, seed))
    mask = np.zeros(P, dtype=bool)
    mask[known_idx] = True
    unknown_idx = np.flatnonzero(~mask)
    known = dense.subset(known_idx)
    if order is not None:
        check_conditioning(build_sh_matrix(known, order), threshold,
                           f"{n_known} known directions at SH order {order}")
    unknown = dense.subset(unknown_idx) if unknown_idx.size else None
    return KnownSplit(known, unknown, known_idx, unknown_idx)


@dataclass(frozen=True)
class SynthConfig:
    """Statistical model for synthetic subjects.

    Coefficient std at order n and bin l is ``s0 * exp(-n / n_c(l))`` with
    ``n_c`` rising linearly from ``cutoff_min`` to the ground-truth order.
    Each coefficient varies smoothly over frequency (Gaussian correlation
    of width ``freq_corr`` on the normalised axis; 0 gives independent bins).
    """

    order: int = 16
    s0: float = 3.0
    cutoff_min: float = 2.0
    freq_corr: float = 0.08
    envelope_mean: float = -15.0
    envelope_amp: float = 4.0
    envelope_corr: float = 0.3

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.s0 < 0 or self.envelope_amp < 0:
            raise ValueError("amplitudes must be >= 0")
        if not self.cutoff_min > 0:
            raise ValueError("cutoff_min must be > 0")
        if self.freq_corr < 0 or self.envelope_corr < 0:
            raise ValueError("correlation widths must be >= 0")


def _smooth_noise(rng: np.random.Generator, u: np.ndarray, width: float, n: int) -> np.ndarray:
    """n unit-variance Gaussian processes over u (shape (n, len(u)))."""
    z = rng.standard_normal((n, u.size))
    if width == 0 or u.size == 1:
        return z
    K = np.exp(-0.5 * ((u[:, None] - u[None, :]) / width) ** 2)
    w, V = np.linalg.eigh(K)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return z @ root.T


def synth_coefficients(seed, freqs: FrequencyAxis, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Random SH coefficients ((order+1)^2, L) for one synthetic ear."""
    rng = np.random.default_rng(seed)
    L = len(freqs)
    u = np.linspace(0.0, 1.0, L) if L > 1 else np.zeros(1)
    cutoff = np.maximum(cfg.cutoff_min + (cfg.order - cfg.cutoff_min) * u, 1e-12)  # order 0: n/cutoff = 0
    n = order_of_index(cfg.order)
    std = cfg.s0 * np.exp(-n[:, None] / cutoff[None, :])
    a = std * _smooth_noise(rng, u, cfg.freq_corr, n.size)
    envelope = cfg.envelope_mean + cfg.envelope_amp * _smooth_noise(rng, u, cfg.envelope_corr, 1)[0]
    a[0] += envelope / Y00
    return a


def synth_subject(seed, freqs: FrequencyAxis, dense: SphericalGrid, cfg: SynthConfig = SynthConfig(),
                  subject_id: int = 0, ear: str = "left") -> HrtfField:
    """Band-limited synthetic HRTF magnitude field on ``dense``."""
    a = synth_coefficients(seed, freqs, cfg)
    values = build_sh_matrix(dense, cfg.order).values @ a
    return HrtfField(np.clip(values, DB_MIN, DB_MAX), dense, freqs, subject_id, ear)


def subject_seed(seed: int, subject_id: int, ear: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, subject_id, EARS.index(ear)])


def make_split(subject_ids: Sequence[int], proportions=DEFAULT_PROPORTIONS, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then a proportional cut keeping every set non-empty."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 subjects for a train/validation/test split, got {n}")
    if len(proportions) != 3 or min(proportions) <= 0:
        raise ValueError("proportions must be three positive numbers")
    total = float(sum(proportions))
    n_val = max(1, int(round(n * proportions[1] / total)))
    n_test = max(1, int(round(n * proportions[2] / total)))
    while n - n_val - n_test < 1:
        if n_val >= n_test:
            n_val -= 1
        else:
            n_test -= 1
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = n - n_val - n_test
    return DatasetSplit(
        tuple(sorted(shuffled[:n_train])),
        tuple(sorted(shuffled[n_train:n_train + n_val])),
        tuple(sorted(shuffled[n_train + n_val:])),
    )


# -- field files ---------------------------------------------------------------
#
#   # comments anywhere
#   hrtf-field 1
#   subject <int>
#   ear <left|right>
#   P <int>
#   L <int>
#   grid                 followed by P lines "theta phi" (radians)
#   freqs                followed by one line of L frequencies (Hz)
#   values               followed by P lines of L dB values


def _fmt(x: float) -> str:
    return repr(float(x))


def save_field(hrtf: HrtfField, path) -> None:
    lines = [f"{FIELD_FORMAT} {FIELD_VERSION}", f"subject {hrtf.subject_id}", f"ear {hrtf.ear}",
             f"P {len(hrtf.grid)}", f"L {len(hrtf.freqs)}", "grid"]
    lines += [f"{_fmt(t)} {_fmt(p)}" for t, p in zip(hrtf.grid.theta, hrtf.grid.phi)]
    lines += ["freqs", " ".join(_fmt(f) for f in hrtf.freqs.values), "values"]
    lines += [" ".join(_fmt(v) for v in row) for row in hrtf.values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _floats(path, lineno, text, expected):
    parts = text.split()
    if len(parts) != expected:
        raise FieldFormatError(path, f"expected {expected} numbers, found {len(parts)}", lineno)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FieldFormatError(path, f"bad number ({exc})", lineno) from None


def load_field(path) -> HrtfField:
    text = Path(path).read_text(encoding="utf-8")
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise FieldFormatError(path, f"unexpected end of file, expected {what}", last + 1)
        item = lines[pos]
        pos += 1
        return item

    def keyword(name):
        lineno, ln = take(name)
        key, _, rest = ln.partition(" ")
        if key != name:
            raise FieldFormatError(path, f"expected '{name}', found {ln!r}", lineno)
        return lineno, rest.strip()

    lineno, version = keyword(FIELD_FORMAT)
    if version != str(FIELD_VERSION):
        raise FieldFormatError(path, f"unsupported version {version!r} (expected {FIELD_VERSION})", lineno)
    header = {}
    for name in ("subject", "ear", "P", "L"):
        lineno, value = keyword(name)
        header[name] = (lineno, value)
    try:
        subject = int(header["subject"][1])
        P = int(header["P"][1])
        L = int(header["L"][1])
    except ValueError as exc:
        raise FieldFormatError(path, f"bad header integer ({exc})") from None
    if P < 1 or L < 1:
        raise FieldFormatError(path, "P and L must be positive", header["P"][0])

    keyword("grid")
    coords = []
    for _ in range(P):
        lineno, ln = take("grid direction")
        if ln.split()[0] == "freqs":
            raise FieldFormatError(path, f"header declares P={P} but grid lists {len(coords)} directions", lineno)
        coords.append(_floats(path, lineno, ln, 2))
    keyword("freqs")
    lineno, ln = take("frequency list")
    freqs = _floats(path, lineno, ln, L)
    keyword("values")
    remaining = len(lines) - pos
    if remaining != P:
        at = lines[pos][0] if remaining else None
        raise FieldFormatError(path, f"header declares P={P} but found {remaining} value rows", at)
    rows = [_floats(path, lineno, ln, L) for lineno, ln in lines[pos:]]
    coords = np.array(coords)
    try:
        return HrtfField(np.array(rows), SphericalGrid(coords[:, 0], coords[:, 1]), FrequencyAxis(freqs),
                         subject, header["ear"][1])
    except ValueError as exc:
        raise FieldFormatError(path, str(exc)) from None


def save_grid(grid: SphericalGrid, path) -> None:
    lines = [f"# P {len(grid)}  sha256 {grid.digest}"]
    lines += [f"{_fmt(t)} {_fmt(p)}" for t, p in zip(grid.theta, grid.phi)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_grid(path) -> SphericalGrid:
    coords = []
    for i, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        ln = ln.strip()
        if ln and not ln.startswith("#"):
            coords.append(_floats(path, i, ln, 2))
    if not coords:
        raise FieldFormatError(path, "grid file lists no directions")
    coords = np.array(coords)
    return SphericalGrid(coords[:, 0], coords[:, 1])
