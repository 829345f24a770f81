"""Entropic optimal transport between pixels and prompts.

The Sinkhorn solver runs in the log domain on dual potentials so that small
regularization values do not underflow the Gibbs kernel. It is written on
:mod:`mpotseg.autodiff` tensors, which lets the segmentation pipeline
differentiate through the unrolled iterations; :func:`sinkhorn_plan` is the
plain-numpy entry point over the same code path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import Tensor, as_tensor, no_grad, where


class OTError(ValueError):
    """Invalid transport problem (shape mismatch, non-finite cost, ...)."""


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iter: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise OTError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iter < 1:
            raise OTError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0:
            raise OTError(f"tol must be positive, got {self.tol}")


@dataclass
class TransportPlan:
    values: np.ndarray
    iterations_used: int
    converged: bool


def uniform_marginals(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(m, 1.0 / m), np.full(n, 1.0 / n)


def _check_marginals(cost_shape, mu, nu):
    m, n = cost_shape[-2:]
    if mu.shape[-1] != m or nu.shape[-1] != n:
        raise OTError(f"marginals {mu.shape[-1]}/{nu.shape[-1]} do not match cost {m}x{n}")
    for name, v in (("mu", mu), ("nu", nu)):
        if np.any(v < 0):
            raise OTError(f"{name} has negative entries")
        if np.any(np.abs(v.sum(axis=-1) - 1.0) > 1e-12):
            raise OTError(f"{name} does not sum to 1")


def sinkhorn_log(cost, mu: np.ndarray, nu: np.ndarray, cfg: SinkhornConfig):
    """Batched log-domain Sinkhorn on a tensor of costs with shape ``(..., M, N)``.

    Returns ``(plan, iterations, converged)`` where ``plan`` is a :class:`Tensor`
    and ``iterations``/``converged`` are arrays over the batch dimensions.
    Each batch member stops updating once its own residual drops below
    ``cfg.tol``, so a batched solve matches the corresponding single solves.
    """
    cost = as_tensor(cost)
    if not np.all(np.isfinite(cost.data)):
        raise OTError("cost matrix has non-finite entries")
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    _check_marginals(cost.shape, mu, nu)
    batch = cost.shape[:-2]
    log_mu = np.log(mu)
    log_nu = np.log(nu)
    log_k = cost * (-1.0 / cfg.epsilon)

    log_b = Tensor(np.zeros(batch + (cost.shape[-1],)))
    log_a = Tensor(np.zeros(batch + (cost.shape[-2],)))
    active = np.ones(batch, dtype=bool)
    iters = np.zeros(batch, dtype=int)
    for _ in range(cfg.max_iter):
        new_a = log_mu - (log_k + log_b.unsqueeze(-2)).logsumexp(axis=-1)
        new_b = log_nu - (log_k + new_a.unsqueeze(-1)).logsumexp(axis=-2)
        if active.all():
            log_a, log_b = new_a, new_b
        else:
            log_a = where(active[..., None], new_a, log_a)
            log_b = where(active[..., None], new_b, log_b)
        iters = iters + active
        # columns are exact after the b-update; rows carry the residual
        plan_np = np.exp(log_k.data + log_a.data[..., :, None] + log_b.data[..., None, :])
        res = np.abs(plan_np.sum(axis=-1) - mu).max(axis=-1)
        active = active & ~(res < cfg.tol)
        if not active.any():
            break
    if not np.all(np.isfinite(log_a.data)) or not np.all(np.isfinite(log_b.data)):
        raise OTError("Sinkhorn potentials became non-finite (internal error)")
    plan = (log_k + log_a.unsqueeze(-1) + log_b.unsqueeze(-2)).exp()
    return plan, iters, ~active


def sinkhorn_plan(cost, marginals=None, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Entropy-regularized transport plan for a single ``M x N`` cost matrix."""
    cfg = cfg or SinkhornConfig()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise OTError(f"cost must be 2-D, got shape {cost.shape}")
    mu, nu = marginals if marginals is not None else uniform_marginals(*cost.shape)
    with no_grad():
        plan, iters, conv = sinkhorn_log(cost, mu, nu, cfg)
    return TransportPlan(plan.data, int(iters), bool(conv))


def _values(plan) -> np.ndarray:
    return np.asarray(plan.values if isinstance(plan, TransportPlan) else plan, dtype=np.float64)


def transport_cost(plan, cost) -> float:
    p, c = _values(plan), np.asarray(cost, dtype=np.float64)
    if p.shape != c.shape:
        raise OTError(f"plan {p.shape} and cost {c.shape} differ in shape")
    return float(np.sum(p * c))


def plan_entropy(plan) -> float:
    """Sum of ``T log T``; this is the negative of the Shannon entropy."""
    p = _values(plan)
    if np.any(p <= 0):
        raise OTError("plan entropy needs strictly positive entries")
    return float(np.sum(p * np.log(p)))


def marginal_residual(plan, marginals) -> float:
    p = _values(plan)
    mu, nu = (np.asarray(v, dtype=np.float64) for v in marginals)
    if p.shape != (mu.size, nu.size):
        raise OTError(f"plan {p.shape} does not match marginals ({mu.size}, {nu.size})")
    return float(max(np.abs(p.sum(axis=1) - mu).max(), np.abs(p.sum(axis=0) - nu).max()))


def _tree_flow(cells, mu, nu):
    # Solve the transportation equalities on a candidate support by peeling
    # leaves; returns None if the support is not a spanning tree.
    m = mu.size
    supply = list(mu)
    demand = list(nu)
    adj: dict[int, set] = {}
    for i, j in cells:
        adj.setdefault(i, set()).add(m + j)
        adj.setdefault(m + j, set()).add(i)
    if len(adj) != m + nu.size:
        return None
    flow = {}
    remaining = len(cells)
    leaves = [v for v, nb in adj.items() if len(nb) == 1]
    while leaves:
        v = leaves.pop()
        if not adj[v]:
            continue
        (u,) = adj[v]
        if v < m:
            i, j = v, u - m
            amount = supply[i]
        else:
            i, j = u, v - m
            amount = demand[j]
        flow[(i, j)] = amount
        supply[i] -= amount
        demand[j] -= amount
        adj[v].discard(u)
        adj[u].discard(v)
        remaining -= 1
        if len(adj[u]) == 1:
            leaves.append(u)
    if remaining:
        return None
    return flow


def exact_ot_oracle(cost, marginals=None) -> TransportPlan:
    """Exact discrete OT by enumerating basic feasible solutions.

    Only for tiny instances (``M*N <= 16``); used as an independent check on
    the entropic solver.
    """
    c = np.asarray(cost, dtype=np.float64)
    m, n = c.shape
    if m * n > 16:
        raise OTError(f"instance {m}x{n} too large for enumeration (M*N must be <= 16)")
    mu, nu = marginals if marginals is not None else uniform_marginals(m, n)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    _check_marginals(c.shape, mu, nu)
    all_cells = [(i, j) for i in range(m) for j in range(n)]
    best, best_cost = None, np.inf
    for cells in itertools.combinations(all_cells, m + n - 1):
        flow = _tree_flow(cells, mu, nu)
        if flow is None or min(flow.values()) < -1e-12:
            continue
        total = sum(f * c[ij] for ij, f in flow.items())
        if total < best_cost - 1e-15:
            best_cost, best = total, flow
    plan = np.zeros_like(c)
    for (i, j), f in best.items():
        plan[i, j] = max(f, 0.0)
    return TransportPlan(plan, 0, True)


def hungarian_assignment(cost) -> TransportPlan:
    """One-to-one pixel/prompt matching with rows chunked into ``N``-sized groups.

    Each row gets exactly one nonzero entry equal to ``1/M``. Within a chunk
    the rows are matched to distinct columns at minimum total cost; a short
    final chunk is matched to the best subset of columns.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise OTError(f"cost must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise OTError("cost matrix has non-finite entries")
    m, n = c.shape
    plan = np.zeros_like(c)
    for start in range(0, m, n):
        rows, cols = linear_sum_assignment(c[start : start + n])
        plan[start + rows, cols] = 1.0 / m
    return TransportPlan(plan, 1, True)
