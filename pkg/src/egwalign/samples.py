"""Point clouds as uniform empirical measures: loading, generation, summaries.

Every random draw in the project flows through :func:`make_rng`, a
counter-based Philox stream keyed by an integer seed plus a tuple of purpose
tags.  Distinct tags give independent streams, and the mapping is stable
across platforms and processes, so any artifact is reproducible bit for bit
from its seed alone.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CsvFormatError",
    "SampleSet",
    "MomentSummary",
    "make_rng",
    "derive_seed",
    "load_csv",
    "save_csv",
    "gen_uniform_cube",
    "gen_gaussian_random_cov",
    "gen_gaussian_iso",
    "center",
    "moments",
    "random_orthogonal",
]


class CsvFormatError(ValueError):
    """A CSV file could not be parsed as a point cloud."""


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Return the counter-based generator for the stream (seed, *tags).

    The Philox key is derived by hashing the seed together with the tags, so
    streams for different purposes never overlap even when they share a seed.
    """
    material = repr((int(seed),) + tuple(tags)).encode("utf-8")
    key = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *tags) -> int:
    """Collapse (seed, *tags) into a fresh integer seed for sub-components."""
    material = repr((int(seed),) + tuple(tags)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little")


@dataclass(frozen=True, eq=False)
class SampleSet:
    """An n x d point cloud carrying the uniform empirical measure.

    Immutable after construction; the coordinate matrix is stored as a
    read-only float64 array.
    """

    points: np.ndarray
    label: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, order="C")
        if pts.ndim != 2:
            raise ValueError(f"points must be 2-D, got shape {pts.shape}")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"need n >= 1 and d >= 1, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class MomentSummary:
    """Second and fourth moments of the norms plus the second-moment matrix."""

    m2: float
    m4: float
    gram: np.ndarray


def load_csv(path, has_header: bool = False, label: str = "") -> SampleSet:
    """Load a point cloud from a comma-separated file, one point per row.

    Raises :class:`CsvFormatError` with the offending row number on ragged or
    unparsable rows, and ValueError on empty files or non-finite entries.
    """
    path = Path(path)
    rows: list[list[float]] = []
    width = None
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CsvFormatError(
                    f"{path}: row {lineno}: expected {width} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise CsvFormatError(f"{path}: row {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no rows")
    pts = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(pts).all():
        bad = int(np.argwhere(~np.isfinite(pts))[0][0]) + 1
        raise ValueError(f"{path}: row {bad}: non-finite value")
    return SampleSet(pts, label=label or path.stem)


def save_csv(points, path) -> None:
    """Write a matrix as CSV with shortest round-trip decimal text.

    Values are formatted with repr, which guarantees bit-exact float
    round-trips within 17 significant digits.
    """
    pts = points.points if isinstance(points, SampleSet) else np.asarray(points)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for row in np.atleast_2d(pts):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def gen_uniform_cube(d: int, n: int, seed: int, label: str = "") -> SampleSet:
    """Draw n i.i.d. points uniform on the cube [-1/sqrt(d), 1/sqrt(d)]^d."""
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    half = 1.0 / np.sqrt(d)
    rng = make_rng(seed, "uniform-cube", d, n)
    pts = rng.uniform(-half, half, size=(n, d))
    return SampleSet(pts, label=label or f"uniform-cube-d{d}")


def gen_gaussian_random_cov(
    d: int, n: int, seed: int, label: str = ""
) -> tuple[SampleSet, np.ndarray]:
    """Draw centered Gaussian points with covariance B^T B + (1/(3d)) I.

    B is a d x d matrix with entries uniform on [-1/d, 1/d], freshly drawn
    from the seed.  Returns (samples, B) so callers can record the draw.
    """
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    rng = make_rng(seed, "gaussian-cov", d, n)
    b = rng.uniform(-1.0 / d, 1.0 / d, size=(d, d))
    cov = b.T @ b + (1.0 / (3.0 * d)) * np.eye(d)
    chol = np.linalg.cholesky(cov)
    pts = rng.standard_normal(size=(n, d)) @ chol.T
    return SampleSet(pts, label=label or f"gaussian-cov-d{d}"), b


def gen_gaussian_iso(
    d: int, n: int, seed: int, std: float = 1.0, label: str = ""
) -> SampleSet:
    """Draw n i.i.d. points from N(0, std^2 I_d)."""
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    if std <= 0:
        raise ValueError("std must be positive")
    rng = make_rng(seed, "gaussian-iso", d, n)
    pts = std * rng.standard_normal(size=(n, d))
    return SampleSet(pts, label=label or f"gaussian-iso-d{d}")


def center(s: SampleSet) -> SampleSet:
    """Subtract the column mean from every row."""
    return SampleSet(s.points - s.points.mean(axis=0), label=s.label)


def moments(s: SampleSet) -> MomentSummary:
    """Mean squared norm, mean fourth-power norm, and (1/n) X^T X."""
    sq = np.einsum("nd,nd->n", s.points, s.points)
    gram = s.points.T @ s.points / s.n
    return MomentSummary(m2=float(sq.mean()), m4=float((sq * sq).mean()), gram=gram)


def random_orthogonal(d: int, seed: int) -> np.ndarray:
    """Orthonormalize a seeded Gaussian matrix; Q^T Q = I within 1e-10."""
    if d < 1:
        raise ValueError("need d >= 1")
    rng = make_rng(seed, "orthogonal", d)
    q, r = np.linalg.qr(rng.standard_normal(size=(d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs[None, :]
