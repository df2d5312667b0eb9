"""Planar closed curves: loading, resampling, Procrustes alignment and
conversion to and from truncated Fourier coefficients.

Curves are stored as ``(P, 2)`` float arrays. A curve parameter
``theta_p = 2 pi p / P`` is attached to point ``p``, so after arc-length
resampling the parametrization is uniform in arc length.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateShapeError, InsufficientResolutionError, MalformedInputError


@dataclass
class PlanarCurve:
    """Ordered closed outline of ``P`` points in the plane."""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DegenerateShapeError(f"expected (P, 2) points, got shape {pts.shape}")
        if pts.shape[0] < 3:
            raise DegenerateShapeError(f"a closed curve needs at least 3 points, got {pts.shape[0]}")
        self.points = pts

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self) -> "PlanarCurve":
        """Check that no two consecutive points (cyclically) coincide."""
        seg = np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=1)
        bad = np.flatnonzero(seg == 0.0)
        if bad.size:
            raise DegenerateShapeError(f"zero-length segment after point {int(bad[0])}")
        return self

    def arc_length(self) -> float:
        seg = np.roll(self.points, -1, axis=0) - self.points
        return float(np.linalg.norm(seg, axis=1).sum())

    def diameter(self) -> float:
        d = self.points[:, None, :] - self.points[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1).max()))


@dataclass
class FourierShape:
    """Coefficients ``c_n``, ``n = 0..N-1``, of both coordinate signals.

    ``coeffs`` has shape ``(2, N)``: row 0 is x, row 1 is y.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim != 2 or c.shape[0] != 2 or c.shape[1] < 1:
            raise ValueError(f"expected (2, N) coefficients, got shape {c.shape}")
        self.coeffs = c

    @property
    def n_bases(self) -> int:
        return self.coeffs.shape[1]

    def to_vector(self) -> np.ndarray:
        """Flatten to ``[x_re, x_im, y_re, y_im]`` (length ``4N``)."""
        c = self.coeffs
        return np.concatenate([c[0].real, c[0].imag, c[1].real, c[1].imag])

    @classmethod
    def from_vector(cls, vec) -> "FourierShape":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size % 4:
            raise ValueError(f"feature vector length must be a multiple of 4, got {vec.shape}")
        xr, xi, yr, yi = np.split(vec, 4)
        return cls(np.stack([xr + 1j * xi, yr + 1j * yi]))

    def to_json(self) -> dict:
        c = self.coeffs
        return {
            "n_bases": self.n_bases,
            "x_re": c[0].real.tolist(),
            "x_im": c[0].imag.tolist(),
            "y_re": c[1].real.tolist(),
            "y_im": c[1].imag.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FourierShape":
        n = int(obj["n_bases"])
        parts = [np.asarray(obj[k], dtype=np.float64) for k in ("x_re", "x_im", "y_re", "y_im")]
        if any(p.shape != (n,) for p in parts):
            raise MalformedInputError(f"every coefficient array must have length n_bases={n}")
        return cls(np.stack([parts[0] + 1j * parts[1], parts[2] + 1j * parts[3]]))


@dataclass
class ShapeDataset:
    """Curves that all share the same point count."""

    curves: list
    labels: Optional[list] = field(default=None)

    def __post_init__(self):
        self.curves = list(self.curves)
        if not self.curves:
            raise DegenerateShapeError("empty dataset")
        sizes = {c.n_points for c in self.curves}
        if len(sizes) != 1:
            raise DegenerateShapeError(f"curves have different point counts: {sorted(sizes)}")
        if self.labels is not None and len(self.labels) != len(self.curves):
            raise ValueError("labels must match curves one to one")

    def __len__(self):
        return len(self.curves)

    def stack(self) -> np.ndarray:
        return np.stack([c.points for c in self.curves])


# -- file io ---------------------------------------------------------------

def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt is not None:
        return fmt.lower()
    suffix = path.suffix.lower().lstrip(".")
    return "json" if suffix == "json" else "csv"


def load_curve(path, format: Optional[str] = None) -> PlanarCurve:
    """Read a curve from CSV (``x,y`` rows, optional header) or JSON
    (``{"points": [[x, y], ...]}``)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedInputError(str(exc), path=path) from exc

    if fmt == "json":
        try:
            obj = json.loads(text)
            rows = obj["points"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedInputError(f"invalid curve JSON ({exc})", path=path) from exc
        pts = []
        for i, row in enumerate(rows):
            try:
                x, y = (float(v) for v in row)
            except (TypeError, ValueError) as exc:
                raise MalformedInputError(f"point {i} is not a pair of numbers", path=path) from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise MalformedInputError(f"point {i} is not finite", path=path)
            pts.append((x, y))
    elif fmt == "csv":
        pts = []
        for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise MalformedInputError(f"expected 2 columns, got {len(row)}", path=path, line=lineno)
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                # a non-numeric first row is a header
                if lineno == 1 and not pts:
                    continue
                raise MalformedInputError(f"cannot parse {row!r} as numbers", path=path, line=lineno)
            if not (np.isfinite(x) and np.isfinite(y)):
                raise MalformedInputError("non-finite coordinate", path=path, line=lineno)
            pts.append((x, y))
    else:
        raise ValueError(f"unknown curve format {fmt!r}")

    if len(pts) < 3:
        raise DegenerateShapeError(f"{path}: a closed curve needs at least 3 points, got {len(pts)}")
    try:
        return PlanarCurve(np.array(pts, dtype=np.float64)).validate()
    except DegenerateShapeError as exc:
        raise DegenerateShapeError(f"{path}: {exc}") from exc


def save_curve(curve: PlanarCurve, path, format: Optional[str] = None) -> None:
    """Write a curve; floats use ``repr`` so reloading is bit-exact."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "json":
        path.write_text(json.dumps({"points": curve.points.tolist()}), encoding="utf-8")
    else:
        lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in curve.points.tolist()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_fourier(path) -> FourierShape:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return FourierShape.from_json(obj)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MalformedInputError(f"invalid FourierShape JSON ({exc})", path=path) from exc


def save_fourier(shape: FourierShape, path) -> None:
    Path(path).write_text(json.dumps(shape.to_json()), encoding="utf-8")


# -- resampling ------------------------------------------------------------

def resample(curve: PlanarCurve, target_P: int) -> PlanarCurve:
    """Place ``target_P`` points equally spaced in arc length along the
    closed polyline, starting at the first point."""
    if target_P < 3:
        raise DegenerateShapeError(f"target_P must be at least 3, got {target_P}")
    pts = curve.points
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    total = seg.sum()
    if not total > 0.0:
        raise DegenerateShapeError("curve has zero arc length")
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s_new = np.arange(target_P) * (total / target_P)
    out = np.column_stack([np.interp(s_new, s, closed[:, 0]), np.interp(s_new, s, closed[:, 1])])
    return PlanarCurve(out)


# -- Procrustes ------------------------------------------------------------

def _normalize(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    size = np.sqrt((centered ** 2).sum())
    if size == 0.0:
        raise DegenerateShapeError("curve has zero centroid size")
    return centered / size


def _rotation_onto(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R (no reflection) minimizing ||src @ R.T - dst||^2 for centered configurations."""
    a = (src * dst).sum()
    b = (src[:, 0] * dst[:, 1] - src[:, 1] * dst[:, 0]).sum()
    theta = np.arctan2(b, a)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def procrustes_objective(shapes: np.ndarray, mean: np.ndarray) -> float:
    return float(((shapes - mean[None]) ** 2).sum())


def procrustes_align(dataset: ShapeDataset, max_iters: int = 100, tol: float = 1e-10,
                     history: Optional[list] = None):
    """Generalized Procrustes alignment to unit centroid size.

    Returns ``(aligned, mean)``. The mean is reported in the rotation that
    best fits the average of the normalized inputs, so the result does not
    depend on the order of the curves.

    If ``history`` is a list, the summed squared distance to the mean is
    appended after every iteration.
    """
    if len(dataset) < 2:
        raise DegenerateShapeError("Procrustes alignment needs at least two curves")
    raw = np.stack([_normalize(c.points) for c in dataset.curves])

    shapes = raw.copy()
    mean = shapes[0].copy()
    for _ in range(max_iters):
        shapes = np.stack([s @ _rotation_onto(s, mean).T for s in shapes])
        new_mean = _normalize(shapes.mean(axis=0))
        shift = np.sqrt(((new_mean - mean) ** 2).sum())
        mean = new_mean
        if history is not None:
            history.append(procrustes_objective(shapes, mean))
        if shift < tol:
            break

    # orientation is only defined up to a global rotation; pin it to the data
    ref = raw.mean(axis=0)
    if np.sqrt((ref ** 2).sum()) > 1e-12:
        R = _rotation_onto(mean, ref)
    else:
        k = int(np.argmax(np.linalg.norm(mean, axis=1)))
        ang = np.arctan2(mean[k, 1], mean[k, 0])
        R = np.array([[np.cos(-ang), -np.sin(-ang)], [np.sin(-ang), np.cos(-ang)]])
    mean = mean @ R.T
    shapes = np.stack([s @ _rotation_onto(s, mean).T for s in shapes])

    aligned = ShapeDataset([PlanarCurve(s) for s in shapes], labels=dataset.labels)
    return aligned, PlanarCurve(mean)


# -- Fourier ---------------------------------------------------------------

def curve_to_fourier(curve, n_bases: int) -> FourierShape:
    """``c_n = (1/P) sum_p c(theta_p) exp(-i n theta_p)`` for ``n < n_bases``."""
    pts = curve.points if isinstance(curve, PlanarCurve) else np.asarray(curve, dtype=np.float64)
    P = pts.shape[0]
    if n_bases < 1:
        raise ValueError("n_bases must be positive")
    if n_bases > P:
        raise InsufficientResolutionError(f"n_bases={n_bases} exceeds the {P} curve samples")
    spec = np.fft.fft(pts, axis=0) / P
    return FourierShape(spec[:n_bases].T)


def synthesis_matrix(n_bases: int, out_P: int) -> np.ndarray:
    """Real matrix ``S`` with ``S @ [re_0..re_{N-1}, im_0..im_{N-1}]`` giving
    ``Re c_0 + 2 sum_{n>=1} Re(c_n e^{i n theta})`` at ``out_P`` nodes."""
    theta = 2.0 * np.pi * np.arange(out_P) / out_P
    n = np.arange(n_bases)
    w = np.where(n == 0, 1.0, 2.0)
    ang = np.outer(theta, n)
    cos_part = w * np.cos(ang)
    sin_part = -w * np.sin(ang)
    sin_part[:, 0] = 0.0
    return np.hstack([cos_part, sin_part])


def fourier_to_curve(shape: FourierShape, out_P: int) -> PlanarCurve:
    if out_P < 3:
        raise DegenerateShapeError(f"out_P must be at least 3, got {out_P}")
    return PlanarCurve(synthesize_points(shape.to_vector(), out_P))


def synthesize_points(vec, out_P: int) -> np.ndarray:
    """Synthesize flattened coefficient vectors (shape ``(..., 4N)``) onto
    ``out_P`` points; returns ``(..., out_P, 2)``."""
    vec = np.asarray(vec, dtype=np.float64)
    N = vec.shape[-1] // 4
    S = synthesis_matrix(N, out_P)
    x = vec[..., : 2 * N] @ S.T
    y = vec[..., 2 * N:] @ S.T
    return np.stack([x, y], axis=-1)


def circle(n_points: int, radius: float = 1.0, center=(0.0, 0.0)) -> PlanarCurve:
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    return PlanarCurve(np.column_stack([center[0] + radius * np.cos(theta),
                                        center[1] + radius * np.sin(theta)]))


def ellipse(n_points: int, a: float, b: float, center=(0.0, 0.0), angle: float = 0.0) -> PlanarCurve:
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    xy = np.column_stack([a * np.cos(theta), b * np.sin(theta)])
    c, s = np.cos(angle), np.sin(angle)
    xy = xy @ np.array([[c, -s], [s, c]]).T
    return PlanarCurve(xy + np.asarray(center, dtype=np.float64))


def as_dataset(curves: Sequence[PlanarCurve], labels=None) -> ShapeDataset:
    return ShapeDataset(list(curves), labels=labels)
