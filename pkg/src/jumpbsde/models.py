"""Problem definitions: forward jump models, drivers, payoffs and presets."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import specfun
from ._validation import check_positive, check_non_negative

__all__ = [
    "GaussianJumpDiffusionSpec",
    "CgmySpec",
    "LevyAggregates",
    "FbsdeProblem",
    "LinearDriver",
    "IdentityPayoff",
    "CallPayoff",
    "BasketCallPayoff",
    "merton_exponential_compensator",
    "cgmy_exponential_compensator",
    "cgmy_drift_compensator",
    "cgmy_tail",
    "cgmy_aggregates",
    "small_jump_variance",
    "make_problem",
    "PRESETS",
]

SCHEMES = ("exponential_exact", "euler", "cgmy")


def _per_asset(value, d, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (d,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class GaussianJumpDiffusionSpec:
    """Exponential jump diffusion with Gaussian log-jump marks, one Poisson measure per asset.

    Each coordinate follows ``dX/X- = r dt + sigma dW + int (e^z - 1) Ñ(dt, dz)``
    with ``nu(dz) = lam * N(mu_j, sigma_j**2)(dz)``; drivers are mutually independent.
    """

    d: int = 1
    x0: np.ndarray = 1.0
    r: np.ndarray = 0.0
    sigma: np.ndarray = 0.0
    lam: float = 0.0
    mu_j: float = 0.0
    sigma_j: float = 1.0

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError("d must be >= 1")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "x0", _per_asset(self.x0, self.d, "x0"))
        object.__setattr__(self, "r", _per_asset(self.r, self.d, "r"))
        object.__setattr__(self, "sigma", _per_asset(self.sigma, self.d, "sigma"))
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        check_non_negative(self.lam, "lam")
        check_positive(self.sigma_j, "sigma_j")

    @cached_property
    def kappa(self):
        return merton_exponential_compensator(self)[0]

    def drift(self, x):
        return self.r * x

    def diffusion(self, x):
        # diagonal volatility per coordinate
        return self.sigma * x

    def jump_shift(self, x, z):
        return x * np.expm1(z)


@dataclass(frozen=True)
class LevyAggregates:
    kappa: float
    kappa_c: float
    sigma_eps: float
    lambda_eps_plus: float
    lambda_eps_minus: float
    b_eps_plus: float
    b_eps_minus: float


@dataclass(frozen=True, eq=False)
class CgmySpec:
    """Exponential CGMY price with small jumps below ``eps`` replaced by a Brownian term."""

    C: float = 0.1
    G: float = 1.4
    M: float = 1.3
    Y: float = 0.5
    r: float = 0.04
    x0: float = 1.0
    eps: float = 1e-4

    def __post_init__(self):
        check_non_negative(self.C, "C")
        check_positive(self.G, "G")
        if not self.M > 1:
            raise ValueError(f"M must exceed 1 for a finite exponential moment, got {self.M}")
        if not 0 < self.Y < 1:
            raise ValueError(f"Y must lie in (0, 1), got {self.Y}")
        if not 0 < self.eps <= 1:
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        check_positive(self.x0, "x0")

    d = 1

    @cached_property
    def aggregates(self) -> LevyAggregates:
        return cgmy_aggregates(self)

    def diffusion(self, x):
        return self.aggregates.sigma_eps * x

    def jump_shift(self, x, z):
        return x * np.expm1(z)


def merton_exponential_compensator(spec: GaussianJumpDiffusionSpec):
    """Return ``(kappa, kappa1)`` = ``(int (e^z-1) nu, int (e^z-1-z) nu)`` per asset."""
    m = np.exp(spec.mu_j + 0.5 * spec.sigma_j**2)
    kappa = spec.lam * (m - 1.0)
    return kappa, kappa - spec.lam * spec.mu_j


def cgmy_exponential_compensator(spec: CgmySpec):
    """``int (e^z - 1) nu(dz)`` = ``C Gamma(-Y) ((M-1)^Y - M^Y + (G+1)^Y - G^Y)``."""
    C, G, M, Y = spec.C, spec.G, spec.M, spec.Y
    if M <= 1:
        raise ValueError("M must exceed 1")
    return C * specfun.gamma_real(-Y) * ((M - 1) ** Y - M**Y + (G + 1) ** Y - G**Y)


def _cgmy_mean(spec):
    # int z nu(dz); finite because Y < 1
    C, G, M, Y = spec.C, spec.G, spec.M, spec.Y
    return C * specfun.gamma_real(1 - Y) * (M ** (Y - 1) - G ** (Y - 1))


def cgmy_drift_compensator(spec: CgmySpec):
    """Log-price drift ``-int (e^z - 1 - z) nu(dz)`` making the discounted price a martingale."""
    return -(cgmy_exponential_compensator(spec) - _cgmy_mean(spec))


def cgmy_tail(C, rate, Y, eps):
    """Big-jump intensity, big-jump first moment and small-jump variance of one tail.

    The tail density is ``C exp(-rate z) z**(-1-Y)`` on ``z > 0``. Returns
    ``(lambda_eps, int_eps^inf z nu, int_0^eps z^2 nu)``.
    """
    a = 1.0 - Y
    first = C / rate**a * specfun.gamma_real(a) * (1.0 - specfun.reg_lower_inc_gamma(a, rate * eps))
    lam = C * np.exp(-rate * eps) * eps ** (-Y) / Y - rate / Y * first
    var = C / rate ** (2.0 - Y) * specfun.gamma_real(a + 1) * specfun.reg_lower_inc_gamma(a + 1, rate * eps)
    return float(lam), float(first), float(var)


def small_jump_variance(spec: CgmySpec, eps=None):
    """``int_{|z| < eps} z^2 nu(dz)``, both tails."""
    eps = spec.eps if eps is None else eps
    return cgmy_tail(spec.C, spec.M, spec.Y, eps)[2] + cgmy_tail(spec.C, spec.G, spec.Y, eps)[2]


def cgmy_aggregates(spec: CgmySpec) -> LevyAggregates:
    lam_p, first_p, var_p = cgmy_tail(spec.C, spec.M, spec.Y, spec.eps)
    lam_m, first_m, var_m = cgmy_tail(spec.C, spec.G, spec.Y, spec.eps)
    kappa = cgmy_exponential_compensator(spec)
    return LevyAggregates(
        kappa=kappa,
        kappa_c=kappa - _cgmy_mean(spec),
        sigma_eps=float(np.sqrt(var_p + var_m)),
        lambda_eps_plus=lam_p,
        lambda_eps_minus=lam_m,
        # sign convention: -b = int_eps^inf z nu
        b_eps_plus=-first_p,
        b_eps_minus=-first_m,
    )


class LinearDriver:
    """Driver ``f(t, x, y, z, v) = rate * y``; ``rate = -r`` discounts at ``r``."""

    def __init__(self, rate=0.0):
        self.rate = float(rate)

    def __call__(self, t, x, y, z, v):
        return self.rate * y

    def __repr__(self):
        return f"LinearDriver(rate={self.rate})"


class IdentityPayoff:
    def __call__(self, x):
        return x[..., :1].copy()

    def __repr__(self):
        return "IdentityPayoff()"


class CallPayoff:
    def __init__(self, k):
        self.k = float(k)

    def __call__(self, x):
        return np.maximum(x[..., :1] - self.k, 0.0)

    def __repr__(self):
        return f"CallPayoff(k={self.k})"


class BasketCallPayoff:
    """``(sum_i x_i - d k)^+``."""

    def __init__(self, k):
        self.k = float(k)

    def __call__(self, x):
        d = x.shape[-1]
        return np.maximum(x.sum(axis=-1, keepdims=True) - d * self.k, 0.0)

    def __repr__(self):
        return f"BasketCallPayoff(k={self.k})"


@dataclass(eq=False)
class FbsdeProblem:
    forward: object
    T: float
    n_steps: int
    driver: object
    terminal: object
    scheme: str = "exponential_exact"
    discount_rate: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        check_positive(self.T, "T")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")
        self.n_steps = int(self.n_steps)
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if (self.scheme == "cgmy") != isinstance(self.forward, CgmySpec):
            raise ValueError("the cgmy scheme goes with a CgmySpec forward model and only with it")
        if not callable(self.driver) or not callable(self.terminal):
            raise TypeError("driver and terminal must be callable")

    @property
    def d(self):
        return self.forward.d

    @property
    def dt(self):
        return self.T / self.n_steps

    @property
    def x0(self):
        return np.broadcast_to(np.asarray(self.forward.x0, dtype=float), (self.d,)).copy()

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def simulate(self, rng, batch, n_workers=1):
        from .paths import simulate

        return simulate(self, rng, batch, n_workers=n_workers)


_GAUSSIAN_DEFAULTS = dict(x0=1.0, k=0.9, r=0.04, sigma=0.25, lam=0.3, mu_j=0.5, sigma_j=0.25, T=1.0, n_steps=40)

PRESETS = {
    "pure_jump": dict(x0=1.0, lam=0.3, mu_j=0.5, sigma_j=0.25, T=1.0, n_steps=40, scheme="exponential_exact"),
    "merton_call": dict(_GAUSSIAN_DEFAULTS, scheme="exponential_exact"),
    "basket_call": dict(_GAUSSIAN_DEFAULTS, d=100, scheme="exponential_exact"),
    "cgmy_call": dict(x0=1.0, k=0.9, r=0.04, C=0.1, G=1.4, M=1.3, Y=0.5, eps=1e-4, T=1.0, n_steps=100),
}


def make_problem(preset, **params) -> FbsdeProblem:
    """Build one of the named problems, overriding any of its default parameters."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    defaults = PRESETS[preset]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"invalid parameters for {preset}: {sorted(unknown)}")
    p = dict(defaults, **params)

    if preset == "pure_jump":
        fwd = GaussianJumpDiffusionSpec(d=1, x0=p["x0"], r=0.0, sigma=0.0,
                                        lam=p["lam"], mu_j=p["mu_j"], sigma_j=p["sigma_j"])
        return FbsdeProblem(fwd, p["T"], p["n_steps"], LinearDriver(0.0), IdentityPayoff(),
                            scheme=p["scheme"], discount_rate=0.0, name=preset, params=p)
    if preset in ("merton_call", "basket_call"):
        d = int(p.get("d", 1))
        fwd = GaussianJumpDiffusionSpec(d=d, x0=p["x0"], r=p["r"], sigma=p["sigma"],
                                        lam=p["lam"], mu_j=p["mu_j"], sigma_j=p["sigma_j"])
        check_positive(p["k"], "k")
        payoff = CallPayoff(p["k"]) if preset == "merton_call" else BasketCallPayoff(p["k"])
        return FbsdeProblem(fwd, p["T"], p["n_steps"], LinearDriver(-p["r"]), payoff,
                            scheme=p["scheme"], discount_rate=p["r"], name=preset, params=p)
    fwd = CgmySpec(C=p["C"], G=p["G"], M=p["M"], Y=p["Y"], r=p["r"], x0=p["x0"], eps=p["eps"])
    check_positive(p["k"], "k")
    return FbsdeProblem(fwd, p["T"], p["n_steps"], LinearDriver(-p["r"]), CallPayoff(p["k"]),
                        scheme="cgmy", discount_rate=p["r"], name=preset, params=p)
