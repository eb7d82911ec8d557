"""Special functions used by the CGMY small/large jump split."""

import math

__all__ = ["ConvergenceError", "ln_gamma", "gamma_real", "reg_lower_inc_gamma", "erf"]

_EPS = 1e-14
_MAX_ITER = 500
_TINY = 1e-300


class ConvergenceError(ArithmeticError):
    pass


def ln_gamma(a):
    if not a > 0:
        raise ValueError(f"ln_gamma requires a > 0, got {a}")
    return math.lgamma(a)


def gamma_real(a):
    """Gamma function on the real line minus the poles.

    Negative arguments go through the reflection formula
    ``Gamma(a) = pi / (sin(pi a) Gamma(1 - a))``.
    """
    if a <= 0 and a == math.floor(a):
        raise ValueError(f"gamma_real has a pole at {a}")
    if a > 0:
        return math.gamma(a)
    return math.pi / (math.sin(math.pi * a) * math.gamma(1.0 - a))


def erf(x):
    return math.erf(x)


def _series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    raise ConvergenceError(f"series for P({a}, {x}) did not converge")


def _continued_fraction(a, x):
    # modified Lentz evaluation of the upper tail Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h
    raise ConvergenceError(f"continued fraction for Q({a}, {x}) did not converge")


def reg_lower_inc_gamma(a, x):
    """Regularized lower incomplete gamma ``P(a, x)``.

    Series below ``x = a + 1``, Lentz continued fraction for the complement above.
    """
    if not a > 0:
        raise ValueError(f"reg_lower_inc_gamma requires a > 0, got {a}")
    if x < 0:
        raise ValueError(f"reg_lower_inc_gamma requires x >= 0, got {x}")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return min(1.0, _series(a, x))
    return max(0.0, 1.0 - _continued_fraction(a, x))
