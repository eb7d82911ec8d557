"""Reference values independent of the deep solver: Monte Carlo, closed forms, Fourier densities."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import sampling
from .models import CgmySpec, FbsdeProblem, GaussianJumpDiffusionSpec

__all__ = [
    "PriceEstimate",
    "GridTooNarrowError",
    "FourierDensity",
    "mc_price",
    "sample_terminal",
    "pure_jump_char_fn",
    "cgmy_char_fn",
    "gaussian_char_fn",
    "fft_density",
    "fourier_put_call_price",
    "pure_jump_reference",
    "histogram_l1",
]


class GridTooNarrowError(ValueError):
    pass


@dataclass(frozen=True)
class PriceEstimate:
    value: float
    stderr: float
    n_paths: int
    seed: int

    def to_json(self):
        return json.dumps(asdict(self))


def sample_terminal(problem: FbsdeProblem, rng, n):
    """Draw ``X_T`` from its exact law for the built-in models (no time stepping).

    For the Gaussian-mark model the compound Poisson sum given ``N`` jumps is
    ``N(N mu, N sigma^2)``; for the approximated CGMY model the big-jump sums
    are drawn mark by mark. Both are Lévy models, so the step-by-step schemes
    have exactly this terminal law.
    """
    fwd, T = problem.forward, problem.T
    gen = rng.generator
    if isinstance(fwd, GaussianJumpDiffusionSpec):
        d = fwd.d
        w = gen.standard_normal((n, d)) * np.sqrt(T)
        counts = sampling.poisson_count(rng, fwd.lam * T, (n, d)) if fwd.lam > 0 else np.zeros((n, d))
        jumps = counts * fwd.mu_j + np.sqrt(counts) * fwd.sigma_j * gen.standard_normal((n, d))
        log_x = np.log(fwd.x0) + (fwd.r - 0.5 * fwd.sigma**2 - fwd.kappa) * T + fwd.sigma * w + jumps
        return np.exp(log_x)
    if isinstance(fwd, CgmySpec):
        agg = fwd.aggregates
        w = gen.standard_normal(n) * np.sqrt(T)
        total = np.zeros(n)
        for lam, rate, sign in ((agg.lambda_eps_plus, fwd.M, 1.0), (agg.lambda_eps_minus, fwd.G, -1.0)):
            counts = sampling.poisson_count(rng, lam * T, n)
            marks = sampling.tempered_stable_marks(rng, rate, fwd.Y, fwd.eps, int(counts.sum()))
            total += sign * np.bincount(np.repeat(np.arange(n), counts), weights=marks, minlength=n)
        drift = (fwd.r - agg.kappa_c + agg.b_eps_plus - agg.b_eps_minus) * T
        return (fwd.x0 * np.exp(drift + agg.sigma_eps * w + total))[:, None]
    raise TypeError(f"no terminal sampler for {type(fwd).__name__}")


def mc_price(problem: FbsdeProblem, rng, n_paths=10**6, chunk=1 << 16):
    """``exp(-r T) E[g(X_T)]`` with its standard error (plain Monte Carlo)."""
    if n_paths < 2:
        raise ValueError("need at least two paths")
    disc = np.exp(-problem.discount_rate * problem.T)
    count, mean, m2 = 0, 0.0, 0.0
    for k, lo in enumerate(range(0, n_paths, chunk)):
        nb = min(chunk, n_paths - lo)
        vals = disc * problem.terminal(sample_terminal(problem, rng.substream(k), nb))[:, 0]
        # pairwise merge of chunk moments
        bm = vals.mean()
        bm2 = np.sum((vals - bm) ** 2)
        delta = bm - mean
        tot = count + nb
        mean += delta * nb / tot
        m2 += bm2 + delta**2 * count * nb / tot
        count = tot
    return PriceEstimate(float(mean), float(np.sqrt(m2 / (count - 1) / count)), count, rng.seed)


def pure_jump_char_fn(spec: GaussianJumpDiffusionSpec, q, t, T=1.0, x_t=None):
    """``E[exp(iq ln X_T) | X_t = x_t]`` for the compensated pure-jump model."""
    x_t = float(np.asarray(spec.x0).ravel()[0]) if x_t is None else x_t
    tau = T - t

    def psi(v):
        return spec.lam * (np.exp(1j * v * spec.mu_j - 0.5 * v**2 * spec.sigma_j**2) - 1.0)

    q = np.asarray(q, dtype=complex)
    return np.exp(1j * q * np.log(x_t) - 1j * q * tau * psi(-1j) + tau * psi(q))


def cgmy_char_fn(spec: CgmySpec, u, t):
    """Characteristic function of ``ln X_t`` for the exponential CGMY price.

    ``ln X_t = ln x0 + (r - kappa) t + L_t`` with ``L`` the sum of jumps,
    ``E exp(iu L_t) = exp(t C Gamma(-Y) ((M - iu)^Y - M^Y + (G + iu)^Y - G^Y))``.
    """
    from .specfun import gamma_real

    C, G, M, Y = spec.C, spec.G, spec.M, spec.Y
    u = np.asarray(u, dtype=complex)

    def psi(v):
        return C * gamma_real(-Y) * ((M - 1j * v) ** Y - M**Y + (G + 1j * v) ** Y - G**Y)

    kappa = psi(-1j).real
    return np.exp(1j * u * (np.log(spec.x0) + (spec.r - kappa) * t) + t * psi(u))


def gaussian_char_fn(u, mean=0.0, std=1.0):
    u = np.asarray(u, dtype=complex)
    return np.exp(1j * u * mean - 0.5 * (std * u) ** 2)


@dataclass(frozen=True)
class FourierDensity:
    x: np.ndarray
    density: np.ndarray
    boundary: float

    @property
    def dx(self):
        return self.x[1] - self.x[0]

    def integral(self):
        return float(np.trapezoid(self.density, self.x))

    def cdf(self, points):
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.x))])
        return np.interp(points, self.x, cum, left=0.0, right=cum[-1])


def fft_density(char_fn, n_points=1 << 14, x_min=-8.0, x_max=8.0, tol=1e-12, fail_tol=1e-6, max_points=1 << 22):
    """Density on ``n_points`` equispaced points of ``[x_min, x_max)`` by Fourier inversion.

    ``f(x) = (1/pi) Re int_0^inf exp(-iux) phi(u) du`` with the trapezoid rule
    on ``u_k = k du``, ``du = 2 pi / (n dx)``, evaluated for all ``x`` by one FFT.
    The point count doubles (extending the frequency range) until
    ``|phi(u_max)| < tol``; an error is raised if it stays above ``fail_tol``.
    """
    if n_points & (n_points - 1) or n_points < 2:
        raise ValueError("n_points must be a power of two")
    if not x_max > x_min:
        raise ValueError("need x_max > x_min")
    n = n_points
    while True:
        dx = (x_max - x_min) / n
        du = 2.0 * np.pi / (n * dx)
        u = du * np.arange(n)
        phi = np.asarray(char_fn(u), dtype=complex)
        boundary = float(abs(phi[-1]))
        if boundary < tol or 2 * n > max_points:
            break
        n *= 2
    if boundary > fail_tol:
        raise GridTooNarrowError(f"|phi| = {boundary:.3g} at the frequency boundary {u[-1]:.4g}")
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    f = (du / np.pi) * np.fft.fft(w * phi * np.exp(-1j * u * x_min)).real
    return FourierDensity(x_min + dx * np.arange(n), f, boundary)


def fourier_put_call_price(density: FourierDensity, x0, k, r, T):
    """Call price from a log-price density via the put and parity ``C = P + x0 - k e^{-rT}``."""
    s = np.exp(density.x)
    put = np.trapezoid(np.maximum(k - s, 0.0) * density.density, density.x)
    return float(np.exp(-r * T) * put + x0 - k * np.exp(-r * T))


def pure_jump_reference(spec: GaussianJumpDiffusionSpec):
    """``E[X_T] = X_0`` for the compensated pure-jump model (the q = -i case)."""
    return float(np.asarray(spec.x0).ravel()[0])


def histogram_l1(density: FourierDensity, samples, bins=200, lo=None, hi=None):
    """Sum of absolute differences of bin probabilities, two tail bins included."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("no samples")
    lo = np.quantile(samples, 1e-3) if lo is None else lo
    hi = np.quantile(samples, 1 - 1e-3) if hi is None else hi
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.histogram(samples, edges)[0]
    emp = np.concatenate([[np.sum(samples < lo)], counts, [np.sum(samples > hi)]]) / samples.size
    cdf = density.cdf(edges) / density.cdf(density.x[-1])
    ref = np.concatenate([[cdf[0]], np.diff(cdf), [1.0 - cdf[-1]]])
    return float(np.abs(emp - ref).sum())
