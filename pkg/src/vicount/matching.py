"""Descriptor association by entropic optimal transport with a dustbin.

The transport problem is posed as a maximization of ``<C, P> + H(P) / lam``
over plans whose rows sum to ``a = [1,...,1, M]`` and columns to
``b = [1,...,1, N]``; the extra row and column are the dustbins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .layers import ParamSet, add_mlp, attention, dense_init, mlp
from .tape import Tensor


class SolverDegenerateError(ArithmeticError):
    """Sinkhorn produced non-finite potentials or an all-zero plan."""


class DustbinPredictorParams(ParamSet):
    """Parameters of the dustbin score predictor.

    ``mode="adaptive"`` predicts a score per frame pair from the descriptors;
    ``mode="scalar"`` replaces the predictor with one learnable constant.
    """

    kind = "dustbin"

    @classmethod
    def init(cls, dim: int, n_layers: int, rng: np.random.Generator, mode: str = "adaptive",
             initial_score: float = 1.0):
        if mode == "scalar":
            return cls({"scalar": Tensor(np.array([initial_score]))}, dim=dim, n_layers=0, mode=mode)
        if mode != "adaptive":
            raise ValueError(f"unknown dustbin mode {mode!r}")
        if n_layers < 1:
            raise ValueError("the dustbin encoder needs at least one layer")
        t = {"query": Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(1, dim)))}
        for layer in range(n_layers):
            for name in ("wq", "wk", "wv"):
                t[f"enc{layer}.{name}"], _ = dense_init(rng, dim, dim)
            add_mlp(t, f"enc{layer}.ffn", [dim, 2 * dim, dim], rng, last_gain=0.5)
        add_mlp(t, "out", [2 * dim, dim, 1], rng, last_gain=0.5)
        t["out.b1"] = Tensor(np.array([initial_score]))
        return cls(t, dim=dim, n_layers=n_layers, mode=mode)

    @property
    def mode(self) -> str:
        return self.meta["mode"]


@dataclass
class MatchMatrix:
    plan: np.ndarray  # (N+1, M+1)
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    residual: float
    lam: float
    iters: int
    dustbin_score: float | None = None
    log_plan: Tensor | None = None  # differentiable log P, when solved on a tape

    @property
    def n(self) -> int:
        return self.plan.shape[0] - 1

    @property
    def m(self) -> int:
        return self.plan.shape[1] - 1

    def diagnostics(self) -> dict:
        return {
            "lambda": self.lam,
            "iterations": self.iters,
            "marginal_residual": self.residual,
            "dustbin_score": self.dustbin_score,
        }


def similarity_matrix(da, db):
    return tp.as_tensor(da) @ tp.as_tensor(db).T


def predict_dustbin_score(da, db, params: DustbinPredictorParams):
    """Dustbin score for one frame pair, as a (1, 1) tensor.

    Tokens are ``[q, dA_1..dA_N, q, dB_1..dB_M]``; after the encoder the two
    query slots (positions 0 and N+1) are concatenated and mapped to a scalar.
    """
    if params.mode == "scalar":
        return tp.reshape(params["scalar"], (1, 1))
    da, db = tp.as_tensor(da), tp.as_tensor(db)
    n = da.shape[0]
    q = params["query"]
    x = tp.concat([q, da, q, db], axis=0)
    for layer in range(params.meta["n_layers"]):
        wq, wk, wv = (params[f"enc{layer}.{k}"] for k in ("wq", "wk", "wv"))
        x = x + attention(x @ wq, x @ wk, x @ wv)
        # GELU, unlike tanh, is not odd: tokens carry their own scale into the next pooling step
        x = x + mlp(x, params, f"enc{layer}.ffn", "gelu")
    pooled = tp.concat([x[0:1], x[n + 1 : n + 2]], axis=1)
    return mlp(pooled, params, "out")


def assemble_cost(scores, s):
    """Augmented matrix ``[[S, s], [s, s]]`` of shape (N+1, M+1)."""
    scores = tp.as_tensor(scores)
    s = tp.reshape(tp.as_tensor(s), (1, 1))
    n, m = scores.shape
    column = s * np.ones((n, 1))
    row = s * np.ones((1, m + 1))
    return tp.concat([tp.concat([scores, column], axis=1), row], axis=0)


def dustbin_marginals(n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.ones(n + 1)
    a[-1] = m
    b = np.ones(m + 1)
    b[-1] = n
    return a, b


def marginal_residual(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(max(np.abs(plan.sum(axis=1) - a).max(), np.abs(plan.sum(axis=0) - b).max()))


def _sinkhorn_logdomain(z, log_a, log_b, iters):
    """Alternating log-domain potential updates; works on tensors for taping."""
    f = tp.as_tensor(np.zeros((z.shape[0], 1)))
    g = tp.as_tensor(np.zeros((1, z.shape[1])))
    for _ in range(iters):
        f = log_a - tp.logsumexp(z + g, axis=1)
        g = log_b - tp.logsumexp(z + f, axis=0)
    return z + f + g


def _lse(x, axis):
    top = np.max(x, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.log(np.sum(np.exp(x - top), axis=axis, keepdims=True)) + top


def _sinkhorn_logdomain_plain(z, log_a, log_b, iters):
    """Same updates as the taped form on bare arrays (no per-op wrapping)."""
    f = np.zeros((z.shape[0], 1))
    g = np.zeros((1, z.shape[1]))
    for _ in range(iters):
        f = log_a - _lse(z + g, axis=1)
        g = log_b - _lse(z + f, axis=0)
    return z + f + g


def _scaling_iterates(kernel: np.ndarray, a: np.ndarray, b: np.ndarray, iters: int):
    """All scalings of ``iters`` steps: u_k = a / (K v_{k-1}), v_k = b / (K^T u_k), v_0 = 1."""
    n, m = kernel.shape
    us, vs = np.empty((iters, n)), np.empty((iters + 1, m))
    vs[0] = 1.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for k in range(iters):
            us[k] = a / (kernel @ vs[k])
            vs[k + 1] = b / (kernel.T @ us[k])
    return us, vs


def _scaling_forward(kernel, a, b, iters):
    us, vs = _scaling_iterates(kernel, a, b, iters)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.concatenate([np.log(us[-1]), np.log(vs[-1])])


def _scaling_adjoint(grad, node):
    """Reverse pass through every unrolled iteration.

    The kernel gradient sums one outer product per matrix-vector product; the
    sums are formed as two stacked matrix products.
    """
    kernel = node.inputs[0].value
    a, b, iters = node.attrs["a"], node.attrs["b"], node.attrs["iters"]
    n, m = kernel.shape
    us, vs = _scaling_iterates(kernel, a, b, iters)
    u_bar = grad[:n] / us[-1]
    v_bar = grad[n:] / vs[-1]
    y_bars, w_bars = np.empty((iters, m)), np.empty((iters, n))
    for k in range(iters - 1, -1, -1):
        # v_{k+1} = b / y, y = K^T u_k
        y_bar = -v_bar * vs[k + 1] * vs[k + 1] / b
        u_bar = u_bar + kernel @ y_bar
        # u_k = a / w, w = K v_k
        w_bar = -u_bar * us[k] * us[k] / a
        v_bar = kernel.T @ w_bar
        y_bars[k], w_bars[k] = y_bar, w_bar
        u_bar = np.zeros(n)
    kernel_bar = us.T @ y_bars + w_bars.T @ vs[:-1]
    return (kernel_bar,)


tp.register("sinkhorn_scaling", _scaling_forward, _scaling_adjoint)


def _sinkhorn_scaling_taped(z, a: np.ndarray, b: np.ndarray, iters: int):
    """Recordable scaling-form iterates as one primitive with an unrolled adjoint.

    Rows of the kernel are shifted by their maximum, a constant the scalings
    absorb exactly, so the result is the same function of ``z`` as the
    log-domain form. Returns log P, or None if a scaling leaves float range.
    """
    shifted = z - z.value.max(axis=1, keepdims=True)
    kernel = tp.exp(shifted)
    logs = tp.apply("sinkhorn_scaling", kernel, a=a, b=b, iters=iters)
    if not np.all(np.isfinite(logs.value)):
        return None
    n = z.shape[0]
    log_u = tp.reshape(logs[:n], (n, 1))
    log_v = tp.reshape(logs[n:], (1, z.shape[1]))
    return shifted + log_u + log_v


def _sinkhorn_scaling(z: np.ndarray, a: np.ndarray, b: np.ndarray, iters: int, absorb_at=1e30):
    """Same iterates as the log-domain form, using matrix-vector scaling.

    Potentials are absorbed into the kernel whenever a scaling vector leaves
    ``[1/absorb_at, absorb_at]``. Returns log P, or None on under/overflow.
    """
    f = -z.max(axis=1, keepdims=True)
    g = np.zeros((1, z.shape[1]))
    kernel = np.exp(z + f + g)
    u = np.ones((z.shape[0], 1))
    v = np.ones((1, z.shape[1]))
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for _ in range(iters):
            u = a[:, None] / (kernel @ v.T)
            v = b[None, :] / (u.T @ kernel)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                return None
            if u.max() > absorb_at or u.min() < 1 / absorb_at or v.max() > absorb_at or v.min() < 1 / absorb_at:
                f = f + np.log(u)
                g = g + np.log(v)
                kernel = np.exp(z + f + g)
                u = np.ones_like(u)
                v = np.ones_like(v)
        log_plan = z + f + g + np.log(u) + np.log(v)
    if not np.all(np.isfinite(log_plan)):
        return None
    return log_plan


def sinkhorn(cost, lam: float, iters: int, dustbin_score: float | None = None, method: str = "auto") -> MatchMatrix:
    """Entropic OT plan for an augmented cost matrix.

    Inside an active tape with a cost that requires gradients, every iteration
    is recorded (unrolled) so the plan is differentiable. The iterates are
    computed in scaling form (matrix-vector products on a row-shifted kernel,
    with potential absorption when not taping) and fall back to the
    max-subtracted log-domain form on under/overflow. ``method="log"`` forces
    the log-domain form everywhere.
    """
    if method not in ("auto", "log"):
        raise ValueError(f"unknown Sinkhorn method {method!r}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if iters < 1:
        raise ValueError("need at least one Sinkhorn iteration")
    cost = tp.as_tensor(cost)
    if not np.all(np.isfinite(cost.value)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape[0] - 1, cost.shape[1] - 1
    a, b = dustbin_marginals(n, m)

    log_plan = None
    taped = tp._ACTIVE and cost.requires_grad
    if taped:
        z = cost * lam
        log_plan = _sinkhorn_scaling_taped(z, a, b, iters) if method == "auto" else None
        if log_plan is None or not np.all(np.isfinite(log_plan.value)):
            log_plan = _sinkhorn_logdomain(z, np.log(a)[:, None], np.log(b)[None, :], iters)
        log_values = log_plan.value
    else:
        log_values = _sinkhorn_scaling(lam * cost.value, a, b, iters) if method == "auto" else None
        if log_values is None:
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                log_values = _sinkhorn_logdomain_plain(
                    lam * cost.value, np.log(a)[:, None], np.log(b)[None, :], iters
                )
    if not np.all(np.isfinite(log_values)):
        raise SolverDegenerateError(f"Sinkhorn potentials became non-finite (lambda={lam})")
    plan = np.exp(log_values)
    if plan.sum() == 0.0:
        raise SolverDegenerateError("transport plan underflowed to zero")
    return MatchMatrix(
        plan=plan,
        row_marginal=a,
        col_marginal=b,
        residual=marginal_residual(plan, a, b),
        lam=lam,
        iters=iters,
        dustbin_score=dustbin_score,
        log_plan=log_plan,
    )


def reverse_topk_match(plan: np.ndarray, k: int, theta: float) -> np.ndarray:
    """Hard matches for the non-dustbin rows of a plan (-1 = unmatched).

    Row i proposes its argmax column c_i (dustbin included). The proposal is
    kept only if i is among the K rows with the largest values in column c_i
    (ties to the lower row index) and ``plan[i, c_i] >= theta``. Pass
    ``plan.T`` to match the other frame.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    plan = np.asarray(plan)
    n, m = plan.shape[0] - 1, plan.shape[1] - 1
    body = plan[:n]
    best = np.argmax(body, axis=1)  # first maximum on ties
    out = np.full(n, -1, dtype=np.int64)
    topk_cache: dict[int, set] = {}
    for i in range(n):
        c = int(best[i])
        if c == m or body[i, c] < theta:
            continue
        if c not in topk_cache:
            column = body[:, c]
            order = np.lexsort((np.arange(n), -column))
            topk_cache[c] = set(order[:k].tolist())
        if i in topk_cache[c]:
            out[i] = c
    return out
