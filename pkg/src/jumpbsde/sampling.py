"""Seeded random streams and the jump-mark samplers."""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "RngStream",
    "RejectionLimitError",
    "normal_vector",
    "poisson_count",
    "gaussian_marks",
    "tempered_stable_marks",
    "tempered_stable_mark",
]

BIT_GENERATOR = "Philox4x64"


class RejectionLimitError(RuntimeError):
    pass


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    ``stream_id`` is a tuple of non-negative ints; :meth:`substream` appends one
    more entry, so derived streams never overlap with their parent or siblings.
    The underlying generator is counter-based (Philox), seeded through
    :class:`numpy.random.SeedSequence` spawn keys.
    """

    def __init__(self, seed: int, stream_id=()):
        if isinstance(stream_id, int):
            stream_id = (stream_id,)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (int(index),))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def normal_vector(rng: RngStream, n, scale=1.0):
    if n < 0:
        raise ValueError("n must be non-negative")
    draws = rng.generator.standard_normal(n)
    return draws if scale == 1.0 else scale * draws


def poisson_count(rng: RngStream, mean, size=None):
    if not np.all(np.isfinite(mean)) or np.any(np.asarray(mean) < 0):
        raise ValueError("Poisson mean must be finite and non-negative")
    return rng.generator.poisson(mean, size)


def gaussian_marks(rng: RngStream, mu_j, sigma_j, k):
    if sigma_j <= 0:
        raise ValueError("sigma_j must be positive")
    return mu_j + sigma_j * rng.generator.standard_normal(k)


def tempered_stable_marks(rng: RngStream, rate, Y, eps, k, max_rejections=10**6, return_proposals=False):
    """Draw ``k`` marks with density proportional to ``exp(-rate z) z**(-1-Y)`` on ``[eps, inf)``.

    Pareto proposals ``eps * u**(-1/Y)`` are accepted with probability
    ``exp(-rate (z - eps))``. With ``return_proposals`` the number of
    proposals consumed up to the last accepted draw is returned too.
    """
    if rate <= 0 or not 0 < Y < 1 or eps <= 0:
        raise ValueError("need rate > 0, 0 < Y < 1 and eps > 0")
    gen = rng.generator
    out = np.empty(k)
    filled = 0
    since_accept = 0
    proposed = 0
    # expected acceptance is at least exp(-rate*eps) * P(Pareto < eps + 1/rate) > 0
    while filled < k:
        need = k - filled
        n_prop = max(64, int(need * 1.25) + 16)
        z = eps * gen.random(n_prop) ** (-1.0 / Y)
        accept = gen.random(n_prop) < np.exp(-rate * (z - eps))
        acc_idx = np.flatnonzero(accept)
        if acc_idx.size == 0:
            since_accept += n_prop
            if since_accept >= max_rejections:
                raise RejectionLimitError(
                    f"{since_accept} consecutive rejections (rate={rate}, Y={Y}, eps={eps})"
                )
            proposed += n_prop
            continue
        since_accept = n_prop - 1 - acc_idx[-1]
        take = z[acc_idx[:need]]
        proposed += n_prop if take.size < need else acc_idx[need - 1] + 1
        out[filled:filled + take.size] = take
        filled += take.size
    return (out, proposed) if return_proposals else out


def tempered_stable_mark(rng: RngStream, C, rate, Y, eps, max_rejections=10**6):
    """Single draw; ``C`` scales the Lévy density but not the normalized mark law."""
    if C <= 0:
        raise ValueError("C must be positive")
    gen = rng.generator
    for _ in range(max_rejections):
        z = eps * gen.random() ** (-1.0 / Y)
        if gen.random() < math.exp(-rate * (z - eps)):
            return z
    raise RejectionLimitError(f"{max_rejections} consecutive rejections")
