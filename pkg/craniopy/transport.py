"""Entropic optimal transport between landmark token sets.

All functions broadcast over leading batch dimensions: a cost of shape
(..., N_s, N_f) yields plans of the same shape.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1
DEFAULT_ITERS = 80
LINE_SEARCH_HALVINGS = 20


@dataclass
class TransportPlan:
    plan: torch.Tensor  # T*, (..., N_s, N_f)
    mu: torch.Tensor
    nu: torch.Tensor
    epsilon: float
    iters: int

    def marginal_error(self) -> float:
        """Largest absolute violation of either marginal."""
        rows = (self.plan.sum(dim=-1) - self.mu).abs().max()
        cols = (self.plan.sum(dim=-2) - self.nu).abs().max()
        return float(torch.maximum(rows, cols))


def cosine_cost(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """C(i, j) = 1 - cos(a_i, b_j); zero-norm rows cost 1 against everything."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    a_hat = F.normalize(a, dim=-1, eps=1e-12)
    b_hat = F.normalize(b, dim=-1, eps=1e-12)
    return 1.0 - a_hat @ b_hat.transpose(-1, -2)


def uniform_marginals(cost: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    n_s, n_f = cost.shape[-2], cost.shape[-1]
    mu = torch.full(cost.shape[:-1], 1.0 / n_s, dtype=cost.dtype, device=cost.device)
    nu = torch.full(cost.shape[:-2] + (n_f,), 1.0 / n_f, dtype=cost.dtype, device=cost.device)
    return mu, nu


def _check_marginals(cost: torch.Tensor, mu: torch.Tensor, nu: torch.Tensor) -> None:
    if mu.shape[-1] != cost.shape[-2] or nu.shape[-1] != cost.shape[-1]:
        raise ShapeError(
            f"marginals ({mu.shape[-1]}, {nu.shape[-1]}) do not match cost {tuple(cost.shape[-2:])}"
        )
    for name, m in (("mu", mu), ("nu", nu)):
        if bool((m <= 0).any()):
            raise ValueError(f"marginal {name} must be strictly positive")
        if bool(((m.sum(dim=-1) - 1.0).abs() > 1e-6).any()):
            raise ValueError(f"marginal {name} must sum to 1")


def _dual(f: torch.Tensor, g: torch.Tensor, cost: torch.Tensor, mu: torch.Tensor, nu: torch.Tensor, epsilon: float):
    """<f, mu> + <g, nu> - eps sum exp((f_i + g_j - C_ij) / eps), maximised by the optimal potentials."""
    gibbs = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / epsilon)
    return (f * mu).sum(dim=-1) + (g * nu).sum(dim=-1) - epsilon * gibbs.sum(dim=(-2, -1))


def _residual(f: torch.Tensor, g: torch.Tensor, cost: torch.Tensor, mu: torch.Tensor, nu: torch.Tensor, epsilon: float):
    plan = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / epsilon)
    return (plan.sum(dim=-1) - mu).abs().sum(dim=-1) + (plan.sum(dim=-2) - nu).abs().sum(dim=-1)


def _newton_step(
    f: torch.Tensor, g: torch.Tensor, cost: torch.Tensor, mu: torch.Tensor, nu: torch.Tensor, epsilon: float
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One damped Newton step on the dual potentials.

    Solves [[diag(r), T], [T^T, diag(c)]] [df; dg] = eps [mu - r; nu - c] with a
    machine-epsilon ridge for the constant shift direction, then backtracks on
    t in {1, 1/2, ..., 2^-20}. A step is taken when it raises the dual enough
    or shrinks the L1 marginal residual; otherwise the potentials stay put.
    """
    n_s, n_f = cost.shape[-2], cost.shape[-1]
    plan = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / epsilon)
    rows, cols = plan.sum(dim=-1), plan.sum(dim=-2)
    ridge = torch.finfo(cost.dtype).eps * mu.sum(dim=-1).detach()
    eye_s = torch.eye(n_s, dtype=cost.dtype, device=cost.device)
    eye_f = torch.eye(n_f, dtype=cost.dtype, device=cost.device)
    top = torch.cat([torch.diag_embed(rows) + ridge[..., None, None] * eye_s, plan], dim=-1)
    bottom = torch.cat([plan.transpose(-1, -2), torch.diag_embed(cols) + ridge[..., None, None] * eye_f], dim=-1)
    jacobian = torch.cat([top, bottom], dim=-2)
    rhs = epsilon * torch.cat([mu - rows, nu - cols], dim=-1)
    step, info = torch.linalg.solve_ex(jacobian, rhs.unsqueeze(-1))
    step = torch.where((info == 0)[..., None], step.squeeze(-1), torch.zeros_like(rhs))
    df, dg = step[..., :n_s], step[..., n_s:]

    with torch.no_grad():
        steps = 0.5 ** torch.arange(LINE_SEARCH_HALVINGS + 1, dtype=cost.dtype, device=cost.device)
        shape = (-1,) + (1,) * (f.dim() - 1)
        t = steps.view(shape)
        f_t = f.detach() + t.unsqueeze(-1) * df.detach()
        g_t = g.detach() + t.unsqueeze(-1) * dg.detach()
        dual_0 = _dual(f.detach(), g.detach(), cost.detach(), mu, nu, epsilon)
        residual_0 = _residual(f.detach(), g.detach(), cost.detach(), mu, nu, epsilon)
        slope = ((mu - rows.detach()) * df.detach()).sum(dim=-1) + ((nu - cols.detach()) * dg.detach()).sum(dim=-1)
        ascent = _dual(f_t, g_t, cost.detach(), mu, nu, epsilon) >= dual_0 + 1e-4 * t * slope
        shrink = _residual(f_t, g_t, cost.detach(), mu, nu, epsilon) <= (1.0 - 0.5 * t) * residual_0
        accepted = (ascent | shrink) & torch.isfinite(slope)
        chosen = torch.where(accepted, t.expand_as(accepted), torch.zeros_like(accepted, dtype=cost.dtype)).amax(dim=0)
    return f + chosen.unsqueeze(-1) * df, g + chosen.unsqueeze(-1) * dg


def sinkhorn(
    cost: torch.Tensor,
    mu: Optional[torch.Tensor] = None,
    nu: Optional[torch.Tensor] = None,
    epsilon: float = DEFAULT_EPSILON,
    iters: int = DEFAULT_ITERS,
    tol: Optional[float] = None,
) -> TransportPlan:
    """Log-domain Sinkhorn for min <T, C> - eps H(T) over Pi(mu, nu).

    Runs `iters` rounds of row then column dual updates. The last quarter of
    the rounds replaces the row update with a Newton step on both potentials,
    which drives the row marginals to rounding where plain alternation stalls
    (small eps, near-deterministic costs). The plan is formed after the final
    column update, so column marginals hold to rounding. With `tol`, stops
    early once the row marginal error drops below it. Every step is
    differentiable; the line search only picks a constant step length.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ValueError(f"need at least one Sinkhorn iteration, got {iters}")
    if mu is None or nu is None:
        default_mu, default_nu = uniform_marginals(cost)
        mu = default_mu if mu is None else mu
        nu = default_nu if nu is None else nu
    _check_marginals(cost, mu, nu)

    log_mu, log_nu = torch.log(mu), torch.log(nu)
    f = torch.zeros_like(mu)
    g = torch.zeros_like(nu)
    polish_from = iters - iters // 4
    for it in range(iters):
        if it < polish_from:
            f = epsilon * log_mu - epsilon * torch.logsumexp((g.unsqueeze(-2) - cost) / epsilon, dim=-1)
        else:
            f, g = _newton_step(f, g, cost, mu, nu, epsilon)
        g = epsilon * log_nu - epsilon * torch.logsumexp((f.unsqueeze(-1) - cost) / epsilon, dim=-2)
        if tol is not None:
            with torch.no_grad():
                plan = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / epsilon)
                if float((plan.sum(dim=-1) - mu).abs().max()) < tol:
                    logger.debug(f"Sinkhorn converged after {it + 1} iterations")
                    break

    plan = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / epsilon)
    if not bool(torch.isfinite(plan).all()):
        raise ArithmeticError("non-finite transport plan")
    return TransportPlan(plan=plan, mu=mu, nu=nu, epsilon=epsilon, iters=iters)


def sinkhorn_plain(
    cost: torch.Tensor,
    mu: Optional[torch.Tensor] = None,
    nu: Optional[torch.Tensor] = None,
    epsilon: float = DEFAULT_EPSILON,
    iters: int = DEFAULT_ITERS,
) -> torch.Tensor:
    """Scaling-form Sinkhorn on K = exp(-C/eps); reference for moderate eps."""
    if mu is None or nu is None:
        mu, nu = uniform_marginals(cost)
    K = torch.exp(-cost / epsilon)
    u = torch.ones_like(mu)
    v = torch.ones_like(nu)
    for _ in range(iters):
        u = mu / (K @ v.unsqueeze(-1)).squeeze(-1)
        v = nu / (K.transpose(-1, -2) @ u.unsqueeze(-1)).squeeze(-1)
    return u.unsqueeze(-1) * K * v.unsqueeze(-2)


def ot_loss(plan: torch.Tensor, cost: torch.Tensor) -> torch.Tensor:
    """<T*, C>."""
    if plan.shape != cost.shape:
        raise ShapeError(f"plan {tuple(plan.shape)} and cost {tuple(cost.shape)} differ")
    return (plan * cost).sum(dim=(-2, -1))


def ot_similarity(plan: torch.Tensor, cost: torch.Tensor) -> torch.Tensor:
    """-<T*, C>, in [-2, 0] for cosine costs."""
    return -ot_loss(plan, cost)


def entropy(plan: torch.Tensor) -> torch.Tensor:
    """H(T) = -sum T log T with 0 log 0 = 0."""
    safe = torch.where(plan > 0, plan, torch.ones_like(plan))
    return -(plan * torch.log(safe)).sum(dim=(-2, -1))


def entropic_objective(plan: torch.Tensor, cost: torch.Tensor, epsilon: float) -> torch.Tensor:
    return ot_loss(plan, cost) - epsilon * entropy(plan)


def solve(
    a: torch.Tensor,
    b: torch.Tensor,
    epsilon: float = DEFAULT_EPSILON,
    iters: int = DEFAULT_ITERS,
    envelope: bool = False,
    tol: Optional[float] = None,
) -> Tuple[TransportPlan, torch.Tensor]:
    """Cosine cost between token sets and its entropic plan.

    In envelope mode the plan is computed from a detached cost, so gradients
    reach the tokens only through C in <T*, C>.
    """
    cost = cosine_cost(a, b)
    if envelope:
        with torch.no_grad():
            transport = sinkhorn(cost.detach(), epsilon=epsilon, iters=iters, tol=tol)
    else:
        transport = sinkhorn(cost, epsilon=epsilon, iters=iters, tol=tol)
    return transport, cost


def write_plan_csv(path: Union[str, Path], plan: torch.Tensor) -> None:
    """Dump a single plan: rows are skull landmarks, columns face landmarks."""
    if plan.dim() != 2:
        raise ShapeError(f"expected a single 2D plan, got shape {tuple(plan.shape)}")
    rows = plan.detach().cpu().double().tolist()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["skull_landmark"] + [f"face_{j}" for j in range(plan.shape[1])])
        for i, row in enumerate(rows):
            writer.writerow([i] + [f"{value:.10g}" for value in row])


def entropic_plan_limit(mu: torch.Tensor, nu: torch.Tensor) -> torch.Tensor:
    """mu nu^T, the plan as epsilon grows without bound."""
    return mu.unsqueeze(-1) * nu.unsqueeze(-2)

