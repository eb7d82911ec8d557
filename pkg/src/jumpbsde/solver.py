"""Deep BSDE solver with jumps: rollout, composite loss and training loop."""

from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn, sampling
from ._validation import check_count
from .models import FbsdeProblem, LinearDriver

__all__ = [
    "NetworkStack",
    "SolverConfig",
    "TrainReport",
    "NumericalAbort",
    "RolloutTensors",
    "prepare_batch",
    "rollout_loss",
    "train",
    "evaluate_y0",
    "default_width",
    "default_log_steps",
    "DeepBSDESolver",
]


log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """Training produced a non-finite loss; carries the partial report."""

    def __init__(self, message, report=None, diagnostics=None):
        super().__init__(message)
        self.report = report
        self.diagnostics = diagnostics or {}


GRADIENT_MODES = ("joint", "split")


def default_width(d):
    return d + 20


def default_log_steps(iterations):
    steps = {0, 100, 500}
    steps.update(range(1000, iterations + 1, 1000))
    steps.add(iterations)
    return sorted(s for s in steps if s <= iterations)


class NetworkStack:
    """Trainable y0 plus one value network and one compensator network per time step.

    Networks of all steps share one architecture and live in stacked arrays,
    ``u.weights[l][n]`` being layer ``l`` of the step-``n`` value network.
    """

    def __init__(self, y0, u: nn.MlpParams, v: nn.MlpParams):
        self.y0 = np.asarray(y0, dtype=float).reshape(1, 1)
        self.u = u
        self.v = v

    @classmethod
    def initialize(cls, rng, d, n_steps, width=None, n_hidden=2):
        arch = nn.MlpArchitecture(d, default_width(d) if width is None else width, n_hidden, 1)
        u = nn.init_params(rng.substream(0), arch, stack=n_steps)
        v = nn.init_params(rng.substream(1), arch, stack=n_steps)
        return cls(np.zeros((1, 1)), u, v)

    @property
    def n_steps(self):
        return self.u.weights[0].shape[0]

    @property
    def d(self):
        return self.u.weights[0].shape[1]

    @property
    def u_nets(self):
        return [self.u.step(n) for n in range(self.n_steps)]

    @property
    def v_nets(self):
        return [self.v.step(n) for n in range(self.n_steps)]

    def arrays(self):
        return [self.y0] + self.u.arrays() + self.v.arrays()

    def named_arrays(self):
        out = {"y0": self.y0}
        for tag, p in (("u", self.u), ("v", self.v)):
            for i, (w, b) in enumerate(zip(p.weights, p.biases)):
                out[f"{tag}.W{i}"] = w
                out[f"{tag}.b{i}"] = b
        return out

    def save(self, path):
        nn.save_checkpoint(path, self.named_arrays())

    @classmethod
    def load(cls, path):
        arrays = nn.load_checkpoint(path)
        nets = {}
        for tag in ("u", "v"):
            n_layers = sum(1 for k in arrays if k.startswith(f"{tag}.W"))
            ws = [arrays[f"{tag}.W{i}"] for i in range(n_layers)]
            bs = [arrays[f"{tag}.b{i}"] for i in range(n_layers)]
            arch = nn.MlpArchitecture(ws[0].shape[1], ws[0].shape[2], n_layers - 1, ws[-1].shape[2])
            nets[tag] = nn.MlpParams(ws, bs, arch)
        return cls(arrays["y0"], nets["u"], nets["v"])


@dataclass
class SolverConfig:
    batch_size: int = 64
    iterations: int = 8000
    seed: int = 0
    log_steps: list = None
    lr_schedule: list = None
    width: int = None
    n_hidden: int = 2
    valid_size: int = 1024
    n_workers: int = 1
    gradient_mode: str = "split"

    def __post_init__(self):
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}")
        check_count(self.batch_size, "batch_size")
        check_count(self.iterations, "iterations")
        check_count(self.n_hidden, "n_hidden", minimum=0)
        check_count(self.valid_size, "valid_size", minimum=0)
        if self.width is not None:
            check_count(self.width, "width")

    def schedule(self):
        if self.lr_schedule is not None:
            return [tuple(p) for p in self.lr_schedule]
        return [(0, 1e-2), (self.iterations // 2, 1e-3)]

    def logged(self):
        if self.log_steps is None:
            return default_log_steps(self.iterations)
        if isinstance(self.log_steps, int):
            return sorted(set(range(0, self.iterations + 1, self.log_steps)) | {self.iterations})
        return sorted(set(int(s) for s in self.log_steps if 0 <= s <= self.iterations))


@dataclass
class TrainReport:
    rows: list
    final_y0: float
    final_loss: float
    seed: int
    config: dict
    problem: str
    meta: dict = field(default_factory=dict)

    def to_csv(self, elapsed=True):
        buf = io.StringIO()
        buf.write("step,loss,y0,elapsed_s\n" if elapsed else "step,loss,y0\n")
        for step, loss, y0, el in self.rows:
            buf.write(f"{step},{loss!r},{y0!r}")
            buf.write(f",{el:.6f}\n" if elapsed else "\n")
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "problem": self.problem, "seed": self.seed, "final_y0": self.final_y0,
            "final_loss": self.final_loss, "config": self.config, "meta": self.meta,
            "rows": [dict(zip(("step", "loss", "y0", "elapsed_s"), r)) for r in self.rows],
        }, indent=2)


@dataclass
class RolloutTensors:
    """Network inputs and constants of one path batch, laid out step-major."""

    x: np.ndarray        # [S, B, d] states before each step
    vol_dw: np.ndarray   # [S, B, d] sigma(x)^T dW per coordinate
    vol: np.ndarray      # [S, B, d] diagonal of sigma(x)
    jump_in: np.ndarray  # [S, K, d] post-jump states, padded
    owner: np.ndarray    # [S, K] flat cell n * B + b owning each slot, -1 for padding
    counts: np.ndarray   # [S, B, 1]
    terminal: np.ndarray  # [B, 1] g(X_M)
    dt: np.ndarray       # [S]
    t: np.ndarray        # [S]


def prepare_batch(problem: FbsdeProblem, batch) -> RolloutTensors:
    b, s, d = batch.dw.shape
    x = np.ascontiguousarray(np.swapaxes(batch.x[:, :s, :], 0, 1))
    vol = problem.forward.diffusion(x)
    vol_dw = vol * np.swapaxes(batch.dw, 0, 1)

    step, path, asset, mark = batch.ev_step, batch.ev_path, batch.ev_asset, batch.ev_mark
    order = np.argsort(step, kind="stable")
    step, path, asset, mark = step[order], path[order], asset[order], mark[order]
    per_step = np.bincount(step, minlength=s)
    k = int(per_step.max()) if per_step.size else 0
    slot = np.arange(step.size) - np.repeat(np.cumsum(per_step) - per_step, per_step)
    jump_in = np.repeat(np.broadcast_to(problem.x0, (s, 1, d)), max(k, 1), axis=1)[:, :k, :].copy()
    owner = np.full((s, k), -1, dtype=np.intp)
    if step.size:
        pre = x[step, path, :]
        post = pre.copy()
        post[np.arange(step.size), asset] += problem.forward.jump_shift(pre[np.arange(step.size), asset], mark)
        jump_in[step, slot, :] = post
        owner[step, slot] = step * b + path
    counts = np.bincount(step * b + path, minlength=s * b).reshape(s, b, 1).astype(float)
    terminal = np.asarray(problem.terminal(batch.x[:, s, :]), dtype=float).reshape(b, 1)
    return RolloutTensors(x, vol_dw, vol, jump_in, owner, counts, terminal, batch.dt.copy(),
                          problem.times[:-1].copy())


def rollout_loss(graph, problem: FbsdeProblem, stack: NetworkStack, batch, return_parts=False,
                 gradient_mode="joint"):
    """Terminal mismatch plus the summed per-step compensator penalties.

    ``gradient_mode="joint"`` differentiates the sum with respect to every
    parameter. ``"split"`` gives the same value but routes the terminal term
    only to y0 and the U networks and the penalty only to the V networks.
    """
    if gradient_mode not in GRADIENT_MODES:
        raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}, got {gradient_mode!r}")
    tens = batch if isinstance(batch, RolloutTensors) else prepare_batch(problem, batch)
    s, b, d = tens.x.shape
    if s != stack.n_steps or d != stack.d:
        raise ValueError(f"batch has {s} steps in dimension {d}, networks expect {stack.n_steps} and {stack.d}")
    dt = tens.dt.reshape(s, 1, 1)

    u_val, grad_u = nn.mlp_value_and_input_gradient(graph, stack.u, tens.x)
    v_val = nn.mlp_forward(graph, stack.v, tens.x)
    if tens.jump_in.shape[1] > 0:
        u_jump = nn.mlp_forward(graph, stack.u, tens.jump_in)
        jumps = graph.segment_sum(u_jump, tens.owner, (s, b)) - tens.counts * u_val
    else:
        jumps = graph.constant(np.zeros((s, b, 1)))
    martingale = jumps - v_val * dt
    if gradient_mode == "split":
        v_path = graph.constant(v_val.value)
        penalty_term = graph.constant(jumps.value) - v_val * dt
        martingale = jumps - v_path * dt
    else:
        v_path, penalty_term = v_val, martingale
    diffusion = graph.sum(grad_u * tens.vol_dw, axis=-1, keepdims=True)
    increment = diffusion + martingale

    y0 = graph.parameter(stack.y0)
    if isinstance(problem.driver, LinearDriver):
        # Y_{n+1} = q_n Y_n + incr_n unrolls to a weighted sum over steps
        q = 1.0 - problem.driver.rate * tens.dt
        tail = np.append(np.cumprod(q[::-1])[::-1][1:], 1.0)
        y_final = y0 * float(np.prod(q)) + graph.sum(increment * tail.reshape(s, 1, 1), axis=0)
    else:
        y = y0 + np.zeros((b, 1))
        for n in range(s):
            z = graph.take(grad_u, n) * tens.vol[n]
            f = problem.driver(tens.t[n], tens.x[n], y, z, graph.take(v_path, n))
            y = y - f * float(tens.dt[n]) + graph.take(increment, n)
        y_final = y
    terminal_term = graph.mean(graph.square(tens.terminal - y_final))
    penalty = graph.scale(graph.sum(graph.square(penalty_term)), 1.0 / b)
    loss = terminal_term + penalty
    if return_parts:
        return loss, terminal_term, penalty
    return loss


def evaluate_y0(stack: NetworkStack):
    return float(stack.y0[0, 0])


def train(problem: FbsdeProblem, config: SolverConfig = None, rng=None, callback=None):
    """Online training: a fresh path batch every iteration, Adam on all parameters."""
    config = SolverConfig() if config is None else config
    rng = sampling.RngStream(config.seed) if rng is None else rng
    stack = NetworkStack.initialize(rng.substream(0), problem.d, problem.n_steps, config.width, config.n_hidden)
    params = stack.arrays()
    opt = nn.AdamState(config.schedule())
    logged = set(config.logged())
    data_rng = rng.substream(1)
    rows = []
    cfg = asdict(config)
    t0 = time.perf_counter()

    def report(final_loss=math.nan):
        return TrainReport(rows, evaluate_y0(stack), final_loss, config.seed, cfg, problem.name,
                           {"bit_generator": sampling.BIT_GENERATOR, "n_steps": problem.n_steps, "d": problem.d})

    for step in range(config.iterations + 1):
        batch = problem.simulate(data_rng.substream(step), config.batch_size, n_workers=config.n_workers)
        graph = nn.Graph()
        loss = rollout_loss(graph, problem, stack, batch, gradient_mode=config.gradient_mode)
        value = float(loss.value)
        last = step == config.iterations
        grads = None if last and math.isfinite(value) else graph.gradients(loss, params)
        if not math.isfinite(value) or (grads is not None and not all(np.all(np.isfinite(g)) for g in grads)):
            norms = {} if grads is None else {k: float(np.linalg.norm(g)) for k, g in
                                              zip(stack.named_arrays(), grads)}
            diag = {"iteration": step, "loss": value, "gradient_norms": norms}
            raise NumericalAbort(f"non-finite training state at iteration {step}: loss={value}", report(), diag)
        if step in logged:
            rows.append((step, value, evaluate_y0(stack), time.perf_counter() - t0))
            log.info("step %6d  loss %.5e  y0 %.6f  elapsed %.1fs", *rows[-1])
        if callback is not None:
            callback(step, value, stack)
        if not last:
            nn.adam_step(opt, params, grads)

    final_loss = math.nan
    if config.valid_size > 0:
        valid = problem.simulate(rng.substream(2), config.valid_size, n_workers=config.n_workers)
        final_loss = float(rollout_loss(nn.Graph(), problem, stack, valid).value)
    return report(final_loss), stack


class DeepBSDESolver(BaseEstimator):
    """Estimator wrapper: ``fit(problem)`` trains, ``predict(X)`` evaluates u(0, X).

    The fitted value at ``x0`` is ``y0_``; away from ``x0`` the prediction is
    ``y0_ + U_0(X) - U_0(x0)``, which only the first value network supports.
    """

    def __init__(self, batch_size=64, iterations=8000, seed=0, width=None, n_hidden=2,
                 lr_schedule=None, valid_size=1024, n_workers=1, gradient_mode="split"):
        self.batch_size = batch_size
        self.iterations = iterations
        self.seed = seed
        self.width = width
        self.n_hidden = n_hidden
        self.lr_schedule = lr_schedule
        self.valid_size = valid_size
        self.n_workers = n_workers
        self.gradient_mode = gradient_mode

    def _config(self):
        return SolverConfig(batch_size=self.batch_size, iterations=self.iterations, seed=self.seed,
                            lr_schedule=self.lr_schedule, width=self.width, n_hidden=self.n_hidden,
                            valid_size=self.valid_size, n_workers=self.n_workers,
                            gradient_mode=self.gradient_mode)

    def fit(self, problem, y=None):
        if not isinstance(problem, FbsdeProblem):
            raise TypeError("fit expects an FbsdeProblem")
        self.report_, self.stack_ = train(problem, self._config())
        self.problem_ = problem
        self.y0_ = self.report_.final_y0
        self.n_features_in_ = problem.d
        return self

    def predict(self, X):
        check_is_fitted(self, "stack_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        u0 = self.stack_.u.step(0)
        g = nn.Graph()
        at_x = nn.mlp_forward(g, u0, X).value[:, 0]
        at_x0 = nn.mlp_forward(g, u0, self.problem_.x0[None, :]).value[0, 0]
        return self.y0_ + at_x - at_x0

    def score(self, X, y):
        pred = self.predict(X)
        y = np.asarray(y, dtype=float).ravel()
        return -float(np.mean((pred - y) ** 2))
