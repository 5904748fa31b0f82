"""Fixed-step ODE integration of the learned vector field, zero-shot and prompted."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flow import masked_features
from .numerics import Tensor, no_grad, seeded_rng

SOLVERS = ("euler", "midpoint")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "midpoint"
    n_steps: int = 32

    def __post_init__(self):
        if self.method not in SOLVERS:
            raise ValueError(f"unknown solver {self.method!r}; expected one of {SOLVERS}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")


@dataclass
class FixedContext:
    """Everything the field sees besides the evolving state; held constant while solving."""

    masked: np.ndarray          # (B, T, F + 1)
    symbols: np.ndarray         # (B, T)
    valid: np.ndarray           # (B, T)
    cond: object = None         # ConditionContext or None


@dataclass
class GenerationRequest:
    symbols: Sequence[int]
    durations: Sequence[int]
    z_f: list[str] = field(default_factory=list)
    prompt: np.ndarray | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0

    def aligned_symbols(self) -> np.ndarray:
        durations = np.asarray(self.durations, dtype=np.int64)
        if len(durations) != len(self.symbols) or np.any(durations < 1):
            raise ValueError("durations must be positive and match the symbol count")
        return np.repeat(np.asarray(self.symbols, dtype=np.int64), durations)

    @property
    def n_frames(self) -> int:
        return int(np.sum(self.durations))

    @property
    def zero_shot(self) -> bool:
        return self.prompt is None


def solve_ode(field_fn: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray,
              solver: SolverConfig) -> np.ndarray:
    """Integrate ``dx/dt = field_fn(x, t)`` from t=0 to 1 with ``h = 1 / n_steps``."""
    x = np.array(x0, dtype=np.float64, copy=True)
    h = 1.0 / solver.n_steps
    for k in range(solver.n_steps):
        t = k * h
        if solver.method == "euler":
            x = x + h * field_fn(x, t)
        else:
            mid = x + (0.5 * h) * field_fn(x, t)
            x = x + h * field_fn(mid, t + 0.5 * h)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite ODE state after step {k}")
    return x


def integrate(model, x0: np.ndarray, fixed_context: FixedContext, solver: SolverConfig,
              field_fn: Callable | None = None) -> np.ndarray:
    """Return phi_1(x0) for the model's field (or ``field_fn``, a test hook)."""
    x0 = np.asarray(x0, dtype=np.float64)
    if field_fn is None:
        if x0.shape[:2] != fixed_context.symbols.shape:
            raise ValueError(f"x0 {x0.shape} does not match context {fixed_context.symbols.shape}")
        valid = fixed_context.valid[..., None]

        def field_fn(x, t):
            with no_grad():
                v = model(Tensor(x * valid), fixed_context.masked, fixed_context.symbols,
                          np.full(len(x), t), cond=fixed_context.cond,
                          frame_mask=fixed_context.valid)
            return v.data * valid

    return solve_ode(field_fn, x0, solver)


def _request_tensors(requests: Sequence[GenerationRequest], feature_dim: int):
    b = len(requests)
    t_max = max(r.n_frames for r in requests)
    symbols = np.zeros((b, t_max), dtype=np.int64)
    valid = np.zeros((b, t_max), dtype=bool)
    ctx = np.zeros((b, t_max, feature_dim))
    hidden = np.zeros((b, t_max), dtype=bool)
    x0 = np.zeros((b, t_max, feature_dim))
    for i, r in enumerate(requests):
        n = r.n_frames
        symbols[i, :n] = r.aligned_symbols()
        valid[i, :n] = True
        hidden[i, :n] = True
        if r.prompt is not None:
            p = np.asarray(r.prompt, dtype=np.float64)
            if p.ndim != 2 or p.shape[1] != feature_dim or not len(p) < n:
                raise ValueError(f"prompt of shape {p.shape} invalid for {n} frames")
            ctx[i, :len(p)] = p
            hidden[i, :len(p)] = False
        x0[i, :n] = seeded_rng(r.seed).standard_normal((n, feature_dim))
    masked = masked_features(ctx, hidden)
    masked[~valid] = 0.0
    return x0, FixedContext(masked, symbols, valid)


def generate_batch(model, requests: Sequence[GenerationRequest]) -> list[np.ndarray]:
    """Generate every request; each draws its own x0 from ``seeded_rng(request.seed)``.

    Requests in one call must share a solver configuration.
    """
    if not requests:
        return []
    solvers = {r.solver for r in requests}
    if len(solvers) != 1:
        raise ValueError("requests in one batch must share a solver configuration")
    if any(r.z_f for r in requests) and model.condition_encoder is None:
        raise ValueError("condition tokens given but the model has no adapters injected")
    x0, ctx = _request_tensors(requests, model.config.feature_dim)
    if model.condition_encoder is not None:
        with no_grad():
            ctx.cond = model.encode_condition([list(r.z_f) for r in requests])
    x1 = integrate(model, x0, ctx, solvers.pop())
    outs = []
    for i, r in enumerate(requests):
        out = x1[i, :r.n_frames].copy()
        if r.prompt is not None:
            out[:len(r.prompt)] = r.prompt
        outs.append(out)
    return outs


def generate(model, request: GenerationRequest, rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample one feature sequence. ``rng``, if given, overrides ``request.seed`` for x0."""
    if rng is not None:
        request = GenerationRequest(request.symbols, request.durations, list(request.z_f),
                                    request.prompt, request.solver, int(rng.integers(2**63 - 1)))
    return generate_batch(model, [request])[0]
