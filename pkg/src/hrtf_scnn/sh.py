"""Real spherical harmonics and least-squares spherical harmonic transforms.

Angles follow the acoustics convention used throughout the package:
``theta`` is **elevation** in [-pi/2, pi/2] (0 on the horizontal plane,
+pi/2 at the north pole) and ``phi`` is azimuth in [0, 2*pi). The
Legendre argument is therefore ``sin(theta)``, not ``cos(theta)``.

Basis functions are orthonormal real SH without the Condon-Shortley phase,
stored in ACN order: column ``i = n**2 + n + m``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi
Y00 = 1.0 / math.sqrt(4.0 * math.pi)
DEFAULT_COND_THRESHOLD = 1e6
DUPLICATE_TOL = 1e-9


class IllConditioned(ValueError):
    """Raised when a least-squares SH fit is numerically unsupported."""

    def __init__(self, cond: float, threshold: float, detail: str = ""):
        self.cond = cond
        self.threshold = threshold
        msg = f"condition number of Y^T Y is {cond:.3e} (threshold {threshold:.3e})"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


def acn_index(n: int, m: int) -> int:
    if abs(m) > n:
        raise ValueError(f"|m| must not exceed n (n={n}, m={m})")
    return n * n + n + m


def acn_order_mode(i: int) -> tuple[int, int]:
    if i < 0:
        raise ValueError(f"index must be non-negative, got {i}")
    n = math.isqrt(i)
    return n, i - n * n - n


def n_coeffs(order: int) -> int:
    return (order + 1) ** 2


def order_of_index(order: int) -> np.ndarray:
    """Order n of every flattened coefficient index up to ``order``."""
    return np.repeat(np.arange(order + 1), 2 * np.arange(order + 1) + 1)


@dataclass(frozen=True)
class Direction:
    theta: float
    phi: float

    def __post_init__(self):
        theta = float(self.theta)
        if not (-math.pi / 2 <= theta <= math.pi / 2):
            raise ValueError(f"elevation {theta} outside [-pi/2, pi/2]")
        phi = float(self.phi) % TWO_PI
        if phi >= TWO_PI:  # -tiny % 2pi rounds up to 2pi
            phi = 0.0
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)


def _normalize_phi(phi: np.ndarray) -> np.ndarray:
    phi = np.mod(phi, TWO_PI)
    phi[phi >= TWO_PI] = 0.0
    return phi


def unit_vectors(theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


class SphericalGrid:
    """Ordered set of distinct directions, optionally labelled known/unknown.

    Hashing and equality go through a SHA-256 digest of the coordinates, so
    grids can key caches and be checked against checkpoints.
    """

    def __init__(self, theta, phi, known=None):
        theta = np.array(theta, dtype=np.float64).reshape(-1)
        phi = np.array(phi, dtype=np.float64).reshape(-1)
        if theta.shape != phi.shape:
            raise ValueError("theta and phi must have the same length")
        if theta.size < 1:
            raise ValueError("a grid needs at least one direction")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
            raise ValueError("grid coordinates must be finite")
        if np.any(np.abs(theta) > math.pi / 2):
            raise ValueError("elevation outside [-pi/2, pi/2]")
        phi = _normalize_phi(phi)
        if theta.size > 1:
            # chord length ~ angle at this scale
            pairs = cKDTree(unit_vectors(theta, phi)).query_pairs(DUPLICATE_TOL)
            if pairs:
                p, q = min(pairs)
                raise ValueError(f"directions {p} and {q} closer than {DUPLICATE_TOL} rad")
        if known is not None:
            known = np.array(known, dtype=bool).reshape(-1)
            if known.shape != theta.shape:
                raise ValueError("known mask length must equal grid size")
            known.flags.writeable = False
        theta.flags.writeable = False
        phi.flags.writeable = False
        self.theta = theta
        self.phi = phi
        self.known = known
        self.digest = hashlib.sha256(
            theta.astype("<f8").tobytes() + phi.astype("<f8").tobytes()
        ).hexdigest()

    @classmethod
    def from_directions(cls, directions) -> "SphericalGrid":
        directions = list(directions)
        return cls([d.theta for d in directions], [d.phi for d in directions])

    def __len__(self) -> int:
        return self.theta.size

    def __getitem__(self, p: int) -> Direction:
        return Direction(self.theta[p], self.phi[p])

    def __iter__(self):
        return (self[p] for p in range(len(self)))

    def __eq__(self, other):
        return isinstance(other, SphericalGrid) and self.digest == other.digest

    def __hash__(self):
        return hash(self.digest)

    def __repr__(self):
        return f"SphericalGrid(P={len(self)}, digest={self.digest[:12]})"

    def subset(self, index) -> "SphericalGrid":
        index = np.asarray(index, dtype=np.intp)
        return SphericalGrid(self.theta[index], self.phi[index])

    def with_known(self, known) -> "SphericalGrid":
        return SphericalGrid(self.theta, self.phi, known=known)

    def rotated_z(self, angle: float) -> "SphericalGrid":
        """Directions (theta, phi - angle): where a z-rotated field is sampled."""
        return SphericalGrid(self.theta, self.phi - angle)


@dataclass(frozen=True)
class ShBasisMatrix:
    values: np.ndarray
    order: int
    grid_id: str

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class ShCoefficients:
    values: np.ndarray
    order: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != n_coeffs(self.order):
            raise ValueError(
                f"expected {n_coeffs(self.order)} rows for order {self.order}, got {values.shape[0]}"
            )
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def assoc_legendre(n: int, m: int, x):
    """Associated Legendre function P_n^m(x) without Condon-Shortley phase.

    Upward recurrence in n from the closed form
    P_m^m = (2m-1)!! (1-x^2)^(m/2). Accepts scalar or array ``x``.
    """
    if not (0 <= m <= n):
        raise ValueError(f"need 0 <= m <= n, got n={n}, m={m}")
    xa = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(xa) > 1.0):
        raise ValueError("|x| must not exceed 1")
    s = np.sqrt((1.0 - xa) * (1.0 + xa))
    pmm = np.ones_like(xa)
    for k in range(1, m + 1):
        pmm = pmm * (2 * k - 1) * s
    if n == m:
        out = pmm
    else:
        p_prev, p_cur = pmm, xa * (2 * m + 1) * pmm
        for k in range(m + 2, n + 1):
            p_prev, p_cur = p_cur, ((2 * k - 1) * xa * p_cur - (k + m - 1) * p_prev) / (k - m)
        out = p_cur
    return float(out) if np.ndim(out) == 0 else out


def _sh_norm(n: int, m: int) -> float:
    return math.sqrt((2 * n + 1) / (4 * math.pi) * math.factorial(n - m) / math.factorial(n + m))


def real_sh(n: int, m: int, direction: Direction) -> float:
    """Orthonormal real SH Y_nm at one direction (elevation convention)."""
    if abs(m) > n:
        raise ValueError(f"|m| must not exceed n (n={n}, m={m})")
    x = math.sin(direction.theta)
    am = abs(m)
    p = assoc_legendre(n, am, x) * _sh_norm(n, am)
    if m == 0:
        return p
    if m > 0:
        return math.sqrt(2.0) * p * math.cos(m * direction.phi)
    return math.sqrt(2.0) * p * math.sin(am * direction.phi)


def sh_matrix(order: int, theta, phi) -> np.ndarray:
    """Real SH matrix (P, (order+1)^2) for raw angle arrays.

    Uses the fully normalised Legendre recurrence, which stays bounded for
    high orders where the unnormalised values in :func:`assoc_legendre`
    would overflow.
    """
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    x = np.sin(theta)
    s = np.cos(theta)  # sqrt(1 - x^2) for elevation in [-pi/2, pi/2]
    Y = np.empty((x.size, n_coeffs(order)))

    pmm = np.full_like(x, Y00)
    sqrt2 = math.sqrt(2.0)
    for m in range(order + 1):
        if m > 0:
            pmm = math.sqrt((2 * m + 1) / (2 * m)) * s * pmm
        cos_m = np.cos(m * phi)
        sin_m = np.sin(m * phi)
        p_prev = None
        p_cur = pmm
        for n in range(m, order + 1):
            if n == m + 1:
                p_prev, p_cur = p_cur, math.sqrt(2 * m + 3) * x * pmm
            elif n > m + 1:
                a = math.sqrt((4 * n * n - 1) / (n * n - m * m))
                b = math.sqrt(((n - 1) ** 2 - m * m) / (4 * (n - 1) ** 2 - 1))
                p_prev, p_cur = p_cur, a * (x * p_cur - b * p_prev)
            if m == 0:
                Y[:, n * n + n] = p_cur
            else:
                Y[:, n * n + n + m] = sqrt2 * p_cur * cos_m
                Y[:, n * n + n - m] = sqrt2 * p_cur * sin_m
    return Y


@lru_cache(maxsize=64)
def _cached_matrix(grid: SphericalGrid, order: int) -> np.ndarray:
    Y = sh_matrix(order, grid.theta, grid.phi)
    Y.flags.writeable = False
    return Y


def build_sh_matrix(grid: SphericalGrid, order: int) -> ShBasisMatrix:
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    return ShBasisMatrix(_cached_matrix(grid, order), order, grid.digest)


def condition_number(Y) -> float:
    """2-norm condition number of Y^T Y (squared singular-value ratio of Y)."""
    values = Y.values if isinstance(Y, ShBasisMatrix) else np.asarray(Y)
    sv = np.linalg.svd(values, compute_uv=False)
    if sv.size < values.shape[1] or sv[-1] == 0.0:
        return math.inf
    return float((sv[0] / sv[-1]) ** 2)


def check_conditioning(Y, threshold: float = DEFAULT_COND_THRESHOLD, detail: str = "") -> float:
    values = Y.values if isinstance(Y, ShBasisMatrix) else np.asarray(Y)
    P, K = values.shape
    if P < K:
        raise IllConditioned(math.inf, threshold, f"{P} directions cannot support {K} coefficients")
    cond = condition_number(values)
    if not cond <= threshold:
        raise IllConditioned(cond, threshold, detail)
    return cond


def sht_least_squares(H, Y, threshold: float = DEFAULT_COND_THRESHOLD, ridge: float = 0.0) -> ShCoefficients:
    """Least-squares SH coefficients a minimising ||H - Y a||.

    Solved through an SVD-based least-squares factorisation rather than by
    forming (Y^T Y)^-1. ``ridge`` adds a Tikhonov term ``ridge * ||a||^2``.
    """
    Ymat = Y.values if isinstance(Y, ShBasisMatrix) else np.asarray(Y, dtype=np.float64)
    order = Y.order if isinstance(Y, ShBasisMatrix) else math.isqrt(Ymat.shape[1]) - 1
    H = np.asarray(H, dtype=np.float64)
    squeeze = H.ndim == 1
    if squeeze:
        H = H[:, None]
    if H.shape[0] != Ymat.shape[0]:
        raise ValueError(f"field has {H.shape[0]} rows but basis has {Ymat.shape[0]} directions")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge == 0.0:
        check_conditioning(Ymat, threshold)
        a = scipy.linalg.lstsq(Ymat, H)[0]
    else:
        K = Ymat.shape[1]
        A = np.vstack([Ymat, math.sqrt(ridge) * np.eye(K)])
        B = np.vstack([H, np.zeros((K, H.shape[1]))])
        a = scipy.linalg.lstsq(A, B)[0]
    return ShCoefficients(a, order)


def sht_operator(Y, threshold: float = DEFAULT_COND_THRESHOLD) -> np.ndarray:
    """Matrix S with S @ H == sht_least_squares(H, Y) for any H."""
    Ymat = Y.values if isinstance(Y, ShBasisMatrix) else np.asarray(Y, dtype=np.float64)
    check_conditioning(Ymat, threshold)
    return scipy.linalg.lstsq(Ymat, np.eye(Ymat.shape[0]))[0]


def isht(a, Y) -> np.ndarray:
    """Evaluate SH coefficients on the grid of Y: returns Y @ a."""
    Ymat = Y.values if isinstance(Y, ShBasisMatrix) else np.asarray(Y)
    avals = a.values if isinstance(a, ShCoefficients) else np.asarray(a, dtype=np.float64)
    if Ymat.shape[1] != avals.shape[0]:
        raise ValueError(
            f"basis has {Ymat.shape[1]} columns but coefficients have {avals.shape[0]} rows"
        )
    return Ymat @ avals
