"""Forward path simulation: frozen-coefficient Euler, exact exponential and CGMY schemes."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import sampling
from .models import CgmySpec, FbsdeProblem, GaussianJumpDiffusionSpec, small_jump_variance

__all__ = [
    "JumpEvent",
    "PathBatch",
    "BLOCK_PATHS",
    "simulate",
    "simulate_euler",
    "simulate_exponential_exact",
    "simulate_cgmy",
    "iter_terminal",
    "forward_error_study",
    "error_slope",
]

# paths per random substream; results do not depend on how blocks map to workers
BLOCK_PATHS = 4096

_MAGIC = b"JBSDPATH"
_VERSION = 1


@dataclass(frozen=True)
class JumpEvent:
    asset_index: int
    mark: float


@dataclass(frozen=True)
class _Draws:
    dw: np.ndarray  # [nb, S, d]
    path: np.ndarray
    step: np.ndarray
    asset: np.ndarray
    mark: np.ndarray


@dataclass(eq=False)
class PathBatch:
    """Simulated states plus everything needed to rebuild them.

    Jump events are stored flat and sorted by (path, step); ``offsets[p*S + n]``
    is the first event of path ``p`` in step ``n``.
    """

    x: np.ndarray
    dw: np.ndarray
    dt: np.ndarray
    ev_path: np.ndarray
    ev_step: np.ndarray
    ev_asset: np.ndarray
    ev_mark: np.ndarray
    scheme: str
    coef: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        b, s, _ = self.dw.shape
        flat = self.ev_path * s + self.ev_step
        self.offsets = np.searchsorted(flat, np.arange(b * s + 1), side="left")

    @property
    def batch_size(self):
        return self.x.shape[0]

    @property
    def n_steps(self):
        return self.dw.shape[1]

    @property
    def d(self):
        return self.x.shape[2]

    @property
    def n_events(self):
        return self.ev_mark.size

    @property
    def compensator_drift(self):
        return self.coef["compensator"]

    def jumps(self, p, n):
        i = p * self.n_steps + n
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return [JumpEvent(int(a), float(z)) for a, z in zip(self.ev_asset[lo:hi], self.ev_mark[lo:hi])]

    def jump_sums(self):
        return _jump_sums(self.scheme, self.x.shape[0], self.n_steps, self.d,
                          self.ev_path, self.ev_step, self.ev_asset, self.ev_mark)

    def replay(self):
        """Rebuild all states from x0, the increments and the event table."""
        return _propagate(self.scheme, self.coef, self.dt, self.x[:, 0, :].copy(), self.dw, self.jump_sums())

    def replay_step(self, n):
        js = self.jump_sums()
        return _step(self.scheme, self.coef, n, self.dt[n], np.ascontiguousarray(self.x[:, n, :]),
                     np.ascontiguousarray(self.dw[:, n, :]), np.ascontiguousarray(js[:, n, :]))

    def save(self, path):
        header = json.dumps({"scheme": self.scheme, "meta": self.meta,
                             "coef": {k: np.asarray(v).tolist() for k, v in self.coef.items()}}).encode()
        b, s, d = self.dw.shape
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<IQQQQI", _VERSION, b, s, d, self.n_events, len(header)))
            fh.write(header)
            for arr in (self.x, self.dw, self.dt):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            for arr in (self.ev_path, self.ev_step, self.ev_asset):
                fh.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.ev_mark, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:8] != _MAGIC:
            raise ValueError("not a path batch file")
        version, b, s, d, ne, hl = struct.unpack_from("<IQQQQI", data, 8)
        if version != _VERSION:
            raise ValueError(f"unsupported path batch version {version}")
        pos = 8 + struct.calcsize("<IQQQQI")
        header = json.loads(data[pos:pos + hl])
        pos += hl

        def read(dtype, count, shape):
            nonlocal pos
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += 8 * count
            return arr.astype(float if dtype == "<f8" else np.int64)

        x = read("<f8", b * (s + 1) * d, (b, s + 1, d))
        dw = read("<f8", b * s * d, (b, s, d))
        dt = read("<f8", s, (s,))
        ev = [read("<i8", ne, (ne,)) for _ in range(3)]
        mark = read("<f8", ne, (ne,))
        coef = {k: np.asarray(v) for k, v in header["coef"].items()}
        return cls(x, dw, dt, *ev, mark, header["scheme"], coef, header["meta"])


def _jump_sums(scheme, b, s, d, path, step, asset, mark):
    out = np.zeros((b, s, d))
    # Euler needs sum(e^z - 1) to multiply the frozen state, log schemes need sum(z)
    np.add.at(out, (path, step, asset), np.expm1(mark) if scheme == "euler" else mark)
    return out


def _step(scheme, coef, n, dt, x, dw, js):
    if scheme == "euler":
        return x + coef["r"] * x * dt + coef["sigma"] * x * dw + x * js - coef["kappa"] * dt * x
    incr = coef["drift"] * dt + coef["vol"] * dw + js - coef["compensator"] * dt
    return x * np.exp(incr)


def _propagate(scheme, coef, dt, x0, dw, js):
    b, s, d = dw.shape
    x = np.empty((b, s + 1, d))
    cur = np.ascontiguousarray(x0)
    x[:, 0, :] = cur
    for n in range(s):
        cur = _step(scheme, coef, n, dt[n], cur, np.ascontiguousarray(dw[:, n, :]),
                    np.ascontiguousarray(js[:, n, :]))
        x[:, n + 1, :] = cur
    return x


def _events_from_counts(counts):
    """Flat (path, step, slot) indices of every event, in C order of ``counts``."""
    flat = counts.ravel()
    idx = np.repeat(np.arange(flat.size), flat)
    return np.unravel_index(idx, counts.shape)


def _gaussian_block(spec, dt, rng, nb):
    s, d = dt.size, spec.d
    dw = rng.generator.standard_normal((nb, s, d)) * np.sqrt(dt)[None, :, None]
    if spec.lam > 0:
        counts = sampling.poisson_count(rng, np.broadcast_to((spec.lam * dt)[None, :, None], (nb, s, d)))
    else:
        counts = np.zeros((nb, s, d), dtype=np.int64)
    path, step, asset = _events_from_counts(counts)
    marks = sampling.gaussian_marks(rng, spec.mu_j, spec.sigma_j, path.size)
    return _Draws(dw, path, step, asset, marks)


def _cgmy_block(spec, dt, rng, nb):
    agg = spec.aggregates
    s = dt.size
    dw = rng.generator.standard_normal((nb, s, 1)) * np.sqrt(dt)[None, :, None]
    means = np.stack([agg.lambda_eps_plus * dt, agg.lambda_eps_minus * dt], axis=-1)
    counts = sampling.poisson_count(rng, np.broadcast_to(means[None], (nb, s, 2)))
    path, step, side = _events_from_counts(counts)
    up = side == 0
    marks = np.empty(path.size)
    marks[up] = sampling.tempered_stable_marks(rng, spec.M, spec.Y, spec.eps, int(up.sum()))
    marks[~up] = -sampling.tempered_stable_marks(rng, spec.G, spec.Y, spec.eps, int((~up).sum()))
    return _Draws(dw, path, step, np.zeros_like(path), marks)


def _draw(forward, dt, rng, batch, n_workers):
    sizes = [min(BLOCK_PATHS, batch - lo) for lo in range(0, batch, BLOCK_PATHS)]
    maker = _cgmy_block if isinstance(forward, CgmySpec) else _gaussian_block

    def job(i):
        return maker(forward, dt, rng.substream(i), sizes[i])

    if n_workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            blocks = list(pool.map(job, range(len(sizes))))
    else:
        blocks = [job(i) for i in range(len(sizes))]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return _Draws(
        np.concatenate([blk.dw for blk in blocks]) if blocks else np.zeros((0, dt.size, forward.d)),
        np.concatenate([blk.path + st for blk, st in zip(blocks, starts)]).astype(np.int64),
        np.concatenate([blk.step for blk in blocks]).astype(np.int64),
        np.concatenate([blk.asset for blk in blocks]).astype(np.int64),
        np.concatenate([blk.mark for blk in blocks]),
    )


def _coefficients(forward, scheme):
    if scheme == "cgmy":
        agg = forward.aggregates
        comp = -(agg.b_eps_plus - agg.b_eps_minus)
        return {"drift": np.array([forward.r - agg.kappa_c]), "vol": np.array([agg.sigma_eps]),
                "compensator": np.array([comp])}
    kappa = np.full(forward.d, forward.kappa)
    if scheme == "euler":
        return {"r": forward.r, "sigma": forward.sigma, "kappa": kappa, "compensator": kappa}
    return {"drift": forward.r - 0.5 * forward.sigma**2, "vol": forward.sigma, "compensator": kappa}


def _grid_steps(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be an increasing sequence of at least two times")
    return np.diff(grid)


def _simulate(forward, scheme, grid, rng, batch, n_workers=1):
    if isinstance(batch, bool) or int(batch) != batch or batch < 1:
        raise ValueError(f"batch must be a positive integer, got {batch!r}")
    batch = int(batch)
    dt = _grid_steps(grid)
    draws = _draw(forward, dt, rng, batch, n_workers)
    coef = _coefficients(forward, scheme)
    x0 = np.broadcast_to(np.asarray(forward.x0, dtype=float), (batch, forward.d)).copy()
    js = _jump_sums(scheme, batch, dt.size, forward.d, draws.path, draws.step, draws.asset, draws.mark)
    x = _propagate(scheme, coef, dt, x0, draws.dw, js)
    meta = {"seed": rng.seed, "stream_id": list(rng.stream_id), "scheme": scheme,
            "bit_generator": sampling.BIT_GENERATOR, "block_paths": BLOCK_PATHS}
    if scheme == "cgmy":
        meta["eps"] = forward.eps
    return PathBatch(x, draws.dw, dt, draws.path, draws.step, draws.asset, draws.mark, scheme, coef, meta)


def simulate_euler(problem: FbsdeProblem, rng, batch, n_workers=1) -> PathBatch:
    """Frozen-coefficient Euler scheme for the Gaussian-mark jump diffusion."""
    if not isinstance(problem.forward, GaussianJumpDiffusionSpec):
        raise TypeError("the Euler scheme needs a finite-activity Gaussian-mark model")
    return _simulate(problem.forward, "euler", problem.times, rng, batch, n_workers)


def simulate_exponential_exact(spec: GaussianJumpDiffusionSpec, grid, rng, batch, n_workers=1) -> PathBatch:
    """Exact log-Euler steps ``X exp((r - s^2/2 - kappa) dt + s dW + sum z)``."""
    return _simulate(spec, "exponential_exact", grid, rng, batch, n_workers)


def simulate_cgmy(spec: CgmySpec, grid, rng, batch, n_workers=1) -> PathBatch:
    """Log-price scheme with Brownian small jumps and compound Poisson big jumps (signed marks)."""
    return _simulate(spec, "cgmy", grid, rng, batch, n_workers)


def simulate(problem: FbsdeProblem, rng, batch, n_workers=1) -> PathBatch:
    if problem.scheme == "euler":
        return simulate_euler(problem, rng, batch, n_workers)
    if problem.scheme == "cgmy":
        return simulate_cgmy(problem.forward, problem.times, rng, batch, n_workers)
    return simulate_exponential_exact(problem.forward, problem.times, rng, batch, n_workers)


def iter_terminal(problem: FbsdeProblem, rng, n_paths, chunk=65536):
    """Yield terminal states in chunks without keeping whole paths in memory."""
    chunk = max(BLOCK_PATHS, chunk - chunk % BLOCK_PATHS)
    for k, lo in enumerate(range(0, n_paths, chunk)):
        batch = problem.simulate(rng.substream(k), min(chunk, n_paths - lo))
        yield batch.x[:, -1, :]


def forward_error_study(spec: CgmySpec, eps_list, rng, batch, T=1.0, n_steps=100):
    """Mean squared sup-distance between the eps-approximation and the smallest-eps one.

    All approximations share one probability space: the reference paths are
    simulated once, each coarser eps keeps only the events with ``|z| >= eps``
    and replaces the rest by an extra Brownian term with variance gap
    ``sigma_eps^2 - sigma_ref^2`` driven by a second, shared increment.
    Returns rows ``(eps, e_hat, stderr, bound)`` with bound ``int_{|z|<eps} z^2 nu``.
    """
    eps_list = [float(e) for e in eps_list]
    if any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    grid = np.linspace(0.0, T, n_steps + 1)
    dt = np.diff(grid)
    ref_spec = replace(spec, eps=eps_list[-1])
    draws = _draw(ref_spec, dt, rng.substream(0), batch, 1)
    dw2 = rng.substream(1).generator.standard_normal((batch, n_steps, 1)) * np.sqrt(dt)[None, :, None]
    x0 = np.full((batch, 1), spec.x0)
    sig_ref = np.sqrt(small_jump_variance(ref_spec))

    def paths_at(eps):
        sp = replace(spec, eps=eps)
        keep = np.abs(draws.mark) >= eps
        js = _jump_sums("cgmy", batch, n_steps, 1, draws.path[keep], draws.step[keep],
                        draws.asset[keep], draws.mark[keep])
        gap = np.sqrt(max(sp.aggregates.sigma_eps**2 - sig_ref**2, 0.0))
        coef = _coefficients(sp, "cgmy")
        coef["vol"] = np.array([1.0])
        return _propagate("cgmy", coef, dt, x0, sig_ref * draws.dw + gap * dw2, js)

    x_ref = paths_at(eps_list[-1])
    rows = []
    for eps in eps_list:
        dev = np.max((paths_at(eps) - x_ref)[..., 0] ** 2, axis=1)
        rows.append((eps, float(dev.mean()), float(dev.std(ddof=1) / np.sqrt(batch)),
                     small_jump_variance(spec, eps)))
    return rows


def error_slope(rows):
    """Least-squares slope of log e_hat on log bound, skipping zero-error (reference) rows."""
    pts = [(np.log(b), np.log(e)) for _, e, _, b in rows if e > 0]
    if len(pts) < 2:
        raise ValueError("need at least two rows with positive error")
    lb, le = map(np.asarray, zip(*pts))
    return float(np.polyfit(lb, le, 1)[0])
