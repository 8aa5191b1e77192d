"""Polynomial least-squares trend fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError


@dataclass(frozen=True)
class Fit:
    degree: int
    coefficients: tuple[float, ...]  # constant term first
    r2: float

    def predict(self, x: float) -> float:
        return sum(c * x**i for i, c in enumerate(self.coefficients))


def fit_polynomial(x: Sequence[float], y: Sequence[float], degree: int) -> Fit:
    """Least-squares polynomial of ``degree`` with its coefficient of determination.

    The abscissa is centred and scaled before solving so that large message
    counts do not wreck the conditioning; coefficients are mapped back to
    the original variable.
    """
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgumentError("x and y must be equal-length sequences")
    if len(np.unique(xs)) <= degree:
        raise InvalidArgumentError(f"degree {degree} fit needs more than {degree} distinct x values")
    shift = xs.mean()
    scale = float(np.abs(xs - shift).max()) or 1.0
    t = (xs - shift) / scale
    design = np.vander(t, degree + 1, increasing=True)
    beta, *_ = np.linalg.lstsq(design, ys, rcond=None)

    # expand sum b_k ((x - shift)/scale)^k into powers of x
    poly = np.polynomial.Polynomial(beta)
    coeffs = poly(np.polynomial.Polynomial([-shift / scale, 1 / scale])).coef
    coeffs = np.pad(coeffs, (0, degree + 1 - len(coeffs)))

    resid = ys - design @ beta
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return Fit(degree, tuple(float(c) for c in coeffs), r2)


def linear_and_quadratic(x: Sequence[float], y: Sequence[float]) -> tuple[Fit, Fit | None]:
    lin = fit_polynomial(x, y, 1)
    quad = fit_polynomial(x, y, 2) if len(set(x)) > 2 else None
    return lin, quad
