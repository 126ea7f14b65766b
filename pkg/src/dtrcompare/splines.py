"""Natural cubic spline bases.

The basis is the truncated-power natural cubic construction: with knots
xi_1 < ... < xi_K the functions are

    N_1(x) = 1,   N_2(x) = x,
    N_{k+2}(x) = d_k(x) - d_{K-1}(x),   k = 1, ..., K-2,

where d_k(x) = [(x - xi_k)_+^3 - (x - xi_K)_+^3] / (xi_K - xi_k).  Every
basis function is linear outside [xi_1, xi_K], so the span is exactly the
set of natural cubic splines on these knots and the dimension equals the
number of knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError

__all__ = ["SplineBasis", "build_basis", "evaluate", "quantile_knots"]


@dataclass(frozen=True)
class SplineBasis:
    """Natural cubic spline basis on a fixed knot set.

    ``dimension`` equals the total number of knots (interior + 2 boundary);
    the first two basis functions span the affine functions.
    """

    interior_knots: tuple[float, ...]
    boundary_knots: tuple[float, float]

    @property
    def knots(self) -> np.ndarray:
        return np.asarray(
            (self.boundary_knots[0], *self.interior_knots, self.boundary_knots[1]),
            dtype=float,
        )

    @property
    def dimension(self) -> int:
        return len(self.interior_knots) + 2

    def evaluate(self, x) -> np.ndarray:
        return evaluate(self, x)

    def evaluate_matrix(self, x, include_constant: bool = True) -> np.ndarray:
        """Row-per-point design matrix; drop the constant column for models
        that carry their own intercept (or none, as in Cox regression)."""
        cols = evaluate(self, np.atleast_1d(np.asarray(x, dtype=float)))
        return cols if include_constant else cols[:, 1:]


def build_basis(knots, boundary: tuple[float, float] | None = None) -> SplineBasis:
    """Build a natural cubic basis from interior knots plus boundary knots.

    If ``boundary`` is omitted, the first and last entries of ``knots`` are
    taken as the boundary knots.  At least 2 knots in total are required and
    the pooled knot sequence must be strictly increasing.
    """
    knots = [float(k) for k in np.atleast_1d(np.asarray(knots, dtype=float))]
    if boundary is None:
        if len(knots) < 2:
            raise DataError("a spline basis needs at least 2 knots")
        lo, hi, interior = knots[0], knots[-1], knots[1:-1]
    else:
        lo, hi = float(boundary[0]), float(boundary[1])
        interior = knots
    all_knots = np.asarray([lo, *interior, hi], dtype=float)
    if len(all_knots) < 2:
        raise DataError("a spline basis needs at least 2 knots")
    if not np.all(np.diff(all_knots) > 0):
        raise DataError(f"knots must be strictly increasing, got {all_knots.tolist()}")
    return SplineBasis(interior_knots=tuple(interior), boundary_knots=(lo, hi))


def evaluate(basis: SplineBasis, x) -> np.ndarray:
    """Evaluate all basis functions at ``x``.

    Returns shape ``(dimension,)`` for scalar input, ``(n, dimension)`` for a
    1-d array.  Values are finite for every real ``x``; outside the boundary
    knots each basis function continues linearly.
    """
    scalar = np.isscalar(x) or np.ndim(x) == 0
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    knots = basis.knots
    K = len(knots)
    out = np.empty((len(xv), K), dtype=float)
    out[:, 0] = 1.0
    out[:, 1] = xv
    if K > 2:
        # d_k(x) for k = 1..K-1 (0-indexed: 0..K-2)
        diffs = np.clip(xv[:, None] - knots[None, :-1], 0.0, None) ** 3
        last = np.clip(xv - knots[-1], 0.0, None) ** 3
        d = (diffs - last[:, None]) / (knots[-1] - knots[:-1])[None, :]
        out[:, 2:] = d[:, :-1] - d[:, -1:]
    return out[0] if scalar else out


def quantile_knots(values, n_interior: int) -> SplineBasis:
    """Basis with boundary knots at the data range and interior knots at
    equally spaced quantiles of ``values``.

    Collapses duplicate quantiles (discrete data) by keeping the distinct
    ones; falls back to a 2-knot (affine) basis when the data cannot support
    interior knots.
    """
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size < 2 or np.ptp(v) == 0.0:
        raise DataError("need at least two distinct finite values to place knots")
    lo, hi = float(v.min()), float(v.max())
    if n_interior <= 0:
        return build_basis([], boundary=(lo, hi))
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    qs = np.quantile(v, probs)
    interior = sorted({float(q) for q in qs if lo < q < hi})
    return build_basis(interior, boundary=(lo, hi))
