"""Hyperbolic cross-attention between users and items.

Two routes compute the same attention: an exact quadratic path that
materializes the full query-key similarity matrix, and a linearized path
that factorizes the softmax kernel through positive random features and
runs in O((N+M) m d).  Monte Carlo oracles for the kernel estimator and
its error bound live here as well, so the approximation quality is
measurable rather than assumed.
"""

from __future__ import annotations

import dataclasses
import math

import torch

from . import geometry
from .counters import counters
from .geometry import CurvatureSpace

__all__ = [
    "AttentionConfig",
    "HeadParams",
    "RandomFeatureMap",
    "NormParams",
    "NumericalDegeneracyError",
    "hsm",
    "rescale_to_manifold",
    "project_heads",
    "exact_cross_attention",
    "phi",
    "linear_cross_attention",
    "aggregate_heads",
    "hyperbolic_normalize",
    "mc_kernel_estimate",
    "factorized_kernel",
    "kernel_error_bound_check",
]

# Exponent ceiling in the random-feature map; exp(80) leaves headroom below
# the float64 overflow threshold even after dot products.
_EXP_CLAMP = 80.0


class NumericalDegeneracyError(RuntimeError):
    """Linear-attention denominator underflowed for some query."""


@dataclasses.dataclass
class AttentionConfig:
    heads: int = 1
    temperature: float = 1.0
    similarity: str = "hsm"  # "hsm" or "distance"
    sim_scale: float = 1.0  # c1 in the distance similarity
    sim_offset: float = 0.0  # c2
    mode: str = "exact"  # "exact" or "linear"
    feature_dim: int = 256  # random features m for the linear path
    tie_directions: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.similarity not in ("hsm", "distance"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.mode not in ("exact", "linear"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sim_scale < 0:
            raise ValueError("sim_scale must be >= 0")


@dataclasses.dataclass
class HeadParams:
    """Per-head projection matrices, stacked (H, d, d).

    The unprimed set projects user queries against item keys/values; the
    `_rev` set drives the item-query direction.
    """

    w_query: torch.Tensor
    w_key: torch.Tensor
    w_value: torch.Tensor
    w_query_rev: torch.Tensor
    w_key_rev: torch.Tensor
    w_value_rev: torch.Tensor

    def for_direction(self, direction: str, tied: bool):
        if direction == "user" or tied:
            return self.w_query, self.w_key, self.w_value
        if direction == "item":
            return self.w_query_rev, self.w_key_rev, self.w_value_rev
        raise ValueError(f"unknown direction {direction!r}")


@dataclasses.dataclass
class RandomFeatureMap:
    """Gaussian sample defining the positive feature map; one draw is shared
    by all queries and keys of a forward pass."""

    omega: torch.Tensor  # (m, d), i.i.d. standard normal
    seed: int

    @classmethod
    def draw(cls, dim: int, num_features: int, seed: int) -> "RandomFeatureMap":
        if num_features < 1:
            raise ValueError("num_features must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        omega = torch.randn(num_features, dim, generator=gen, dtype=torch.float64)
        return cls(omega=omega, seed=seed)

    @property
    def num_features(self) -> int:
        return int(self.omega.shape[0])


@dataclasses.dataclass
class NormParams:
    """Hyperbolic-normalization parameters.

    `beta_param` holds tangent coordinates at the pole; the shift point is
    beta = Exp_o((0, beta_param)), so it stays on the manifold under
    unconstrained optimization.  `eps` is a fixed stability constant.
    """

    gamma: torch.Tensor  # (d,)
    beta_param: torch.Tensor  # (d,)
    eps: float = 1e-5


def hsm(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Softmax similarity kernel exp(<x,y>_M); lies in (0, e^-K] on H."""
    return torch.exp(geometry.minkowski_inner(x, y))


def rescale_to_manifold(space: CurvatureSpace, u_hat: torch.Tensor) -> torch.Tensor:
    """Scale a convex combination of hyperboloid points back onto the sheet."""
    return space.sqrt_k * u_hat / geometry.lorentz_magnitude(
        u_hat, keepdim=True, eps=1e-300
    )


def project_heads(
    space: CurvatureSpace, w: torch.Tensor, points: torch.Tensor
) -> torch.Tensor:
    """Apply per-head hyperboloid matmuls: (H, d, d) x (n, d+1) -> (H, n, d+1)."""
    intrinsic = geometry.unlift(space, points)  # (n, d)
    projected = torch.einsum("hij,nj->hni", w, intrinsic)
    return geometry.lift(space, projected)


def _minkowski_gram(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    flipped = torch.cat([-k[..., :1], k[..., 1:]], dim=-1)
    return q @ flipped.transpose(-1, -2)


def _roles(users, items, direction):
    if direction == "user":
        return users, items
    if direction == "item":
        return items, users
    raise ValueError(f"unknown direction {direction!r}")


def exact_cross_attention(
    space: CurvatureSpace,
    cfg: AttentionConfig,
    heads: HeadParams,
    users: torch.Tensor,
    items: torch.Tensor,
    direction: str = "user",
    return_weights: bool = False,
):
    """Quadratic-path attention; returns per-head outputs (H, Nq, d+1).

    With `similarity="hsm"` the softmax logits are <q,k>_M / tau, i.e. the
    log of the HSM kernel; with `"distance"` they are
    (-c1 d(q,k) + c2) / tau.
    """
    queries, keys = _roles(users, items, direction)
    if keys.shape[0] == 0:
        raise ValueError("attention requires at least one key")
    wq, wk, wv = heads.for_direction(direction, cfg.tie_directions)
    q = project_heads(space, wq, queries)
    k = project_heads(space, wk, keys)
    v = project_heads(space, wv, keys)
    gram = _minkowski_gram(q, k)  # (H, Nq, Nk)
    if cfg.similarity == "hsm":
        logits = gram / cfg.temperature
    else:
        dist = space.sqrt_k * torch.acosh(
            (-gram / space.curvature).clamp_min(1.0 + 1e-15)
        )
        logits = (-cfg.sim_scale * dist + cfg.sim_offset) / cfg.temperature
    weights = torch.softmax(logits, dim=-1)
    u_hat = weights @ v
    n_q, n_k = q.shape[1], k.shape[1]
    counters.exact_attention_madds += (
        2 * cfg.heads * n_q * n_k * space.ambient_dim
    )
    out = rescale_to_manifold(space, u_hat)
    if return_weights:
        return out, weights
    return out


def phi(
    space: CurvatureSpace,
    x: torch.Tensor,
    rf: RandomFeatureMap,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Positive random features (..., d+1) -> (..., m) for the HSM kernel.

    phi(x / sqrt(tau)) = exp((K - x0^2) / (2 tau)) / sqrt(m)
                         * [exp(omega_j^T x~ / sqrt(tau))]_j.
    Exponents are clamped at 80; clamp events are tallied in the
    diagnostics counter.
    """
    x0 = x[..., :1]
    spatial = x[..., 1:]
    prefactor_exp = (space.curvature - x0 * x0) / (2.0 * temperature)
    feature_exp = (spatial @ rf.omega.transpose(-1, -2)) / math.sqrt(temperature)
    exponent = prefactor_exp + feature_exp
    clamped = exponent > _EXP_CLAMP
    if clamped.any():
        counters.feature_clamp_events += int(clamped.sum().item())
        exponent = exponent.clamp_max(_EXP_CLAMP)
    return torch.exp(exponent) / math.sqrt(rf.num_features)


def linear_cross_attention(
    space: CurvatureSpace,
    cfg: AttentionConfig,
    heads: HeadParams,
    rf: RandomFeatureMap,
    users: torch.Tensor,
    items: torch.Tensor,
    direction: str = "user",
    return_weights: bool = False,
):
    """Linearized attention via the factorized kernel; O((N+M) m d).

    Accumulates S = sum_j phi(k_j) v_j^T and z = sum_j phi(k_j) once, then
    resolves every query as (S^T phi(q)) / (z^T phi(q)).
    """
    if cfg.similarity != "hsm":
        raise ValueError("the linear path requires the hsm similarity")
    queries, keys = _roles(users, items, direction)
    if keys.shape[0] == 0:
        raise ValueError("attention requires at least one key")
    wq, wk, wv = heads.for_direction(direction, cfg.tie_directions)
    q = project_heads(space, wq, queries)
    k = project_heads(space, wk, keys)
    v = project_heads(space, wv, keys)
    phi_k = phi(space, k, rf, cfg.temperature)  # (H, Nk, m)
    phi_q = phi(space, q, rf, cfg.temperature)  # (H, Nq, m)
    s = phi_k.transpose(-1, -2) @ v  # (H, m, d+1)
    z = phi_k.sum(dim=-2)  # (H, m)
    numerator = phi_q @ s  # (H, Nq, d+1)
    denominator = (phi_q * z.unsqueeze(-2)).sum(-1)  # (H, Nq)
    bad = denominator < 1e-30
    if bad.any():
        idx = int(bad.any(dim=0).nonzero()[0].item())
        raise NumericalDegeneracyError(
            f"linear attention denominator underflow at query index {idx}"
        )
    u_hat = numerator / denominator.unsqueeze(-1)
    n_q, n_k, m, amb = q.shape[1], k.shape[1], rf.num_features, space.ambient_dim
    counters.linear_attention_madds += cfg.heads * (
        (n_q + n_k) * m * space.dim  # feature maps
        + n_k * m * amb  # S accumulation
        + n_k * m  # z accumulation
        + n_q * m * amb  # numerators
        + n_q * m  # denominators
    )
    out = rescale_to_manifold(space, u_hat)
    if return_weights:
        weights = (phi_q @ phi_k.transpose(-1, -2)) / denominator.unsqueeze(-1)
        return out, weights
    return out


def aggregate_heads(space: CurvatureSpace, per_head: torch.Tensor) -> torch.Tensor:
    """Unweighted Lorentz centroid over the head axis: (H, n, d+1) -> (n, d+1)."""
    return geometry.centroid(space, per_head, dim=0)


def hyperbolic_normalize(
    space: CurvatureSpace, x: torch.Tensor, params: NormParams
) -> torch.Tensor:
    """Center at the set centroid, scale in the pole's tangent space, and
    re-anchor at the learned shift point beta = Exp_o((0, beta_param))."""
    if x.shape[0] < 1:
        raise ValueError("hyperbolic_normalize requires at least one point")
    mu = geometry.centroid(space, x, dim=-2)
    dists = geometry.distance(space, x, mu)
    var = (dists * dists).mean()
    logs = geometry.log_map(space, mu.expand_as(x), x)
    o = space.origin(x.dtype).expand_as(x)
    at_pole = geometry.parallel_transport(space, mu.expand_as(x), o, logs)
    scaled = params.gamma * at_pole[..., 1:] / torch.sqrt(var + params.eps)
    v_pole = torch.cat([torch.zeros_like(scaled[..., :1]), scaled], dim=-1)
    beta = geometry.lift(space, params.beta_param)
    v_beta = geometry.parallel_transport(space, o, beta.expand_as(x), v_pole)
    return geometry.exp_map(space, beta.expand_as(x), v_beta)


def mc_kernel_estimate(
    space: CurvatureSpace,
    x: torch.Tensor,
    y: torch.Tensor,
    num_samples: int,
    seed: int,
    chunk: int = 250_000,
) -> float:
    """Monte Carlo estimator of the HSM kernel with the unbiased prefactor:

    exp((-(x0+y0)^2 + 2K) / 2) * mean_w exp(w^T (x~ + y~)),  w ~ N(0, I_d).
    """
    z = (x[1:] + y[1:]).to(torch.float64)
    pref = math.exp((-((x[0] + y[0]).item() ** 2) + 2.0 * space.curvature) / 2.0)
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    remaining = num_samples
    while remaining > 0:
        n = min(chunk, remaining)
        w = torch.randn(n, space.dim, generator=gen, dtype=torch.float64)
        total += torch.exp(w @ z).sum().item()
        remaining -= n
    return pref * total / num_samples


def factorized_kernel(
    x: torch.Tensor, y: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """Closed form of E_Omega[phi(x)^T phi(y)]:

    F(x, y) = exp((2K - x0^2 - y0^2) / (2 tau)) * exp(|x~ + y~|^2 / (2 tau)).

    This is the target the random features converge to; it differs from the
    HSM kernel by the factor exp(x0 y0 / tau) dropped in the factorization.
    """
    x0, y0 = x[..., 0], y[..., 0]
    xs, ys = x[..., 1:], y[..., 1:]
    kx = x0 * x0 - (xs * xs).sum(-1)
    ky = y0 * y0 - (ys * ys).sum(-1)
    z2 = ((xs + ys) ** 2).sum(-1)
    return torch.exp((kx + ky - x0 * x0 - y0 * y0 + z2) / (2.0 * temperature))


def kernel_error_bound_check(
    space: CurvatureSpace,
    x: torch.Tensor,
    y: torch.Tensor,
    num_features: int,
    eps_prob: float,
    delta: float,
    trials: int,
    seed: int,
    chunk: int = 256,
) -> float:
    """Empirical rate at which |HSM - phi^T phi| exceeds the analytic bound
    sqrt(exp(3 (delta - K)) / (m eps)) over independent feature draws.

    Requires the ambient Euclidean norms |x|^2, |y|^2 <= delta under which
    the bound is derived.
    """
    for name, p in (("x", x), ("y", y)):
        if (p * p).sum().item() > delta + 1e-12:
            raise ValueError(f"|{name}|^2 exceeds delta={delta}")
    bound = math.sqrt(
        math.exp(3.0 * (delta - space.curvature)) / (num_features * eps_prob)
    )
    target = hsm(x, y).item()
    xs, ys = x[1:], y[1:]
    pref = math.exp(
        (2.0 * space.curvature - x[0].item() ** 2 - y[0].item() ** 2) / 2.0
    )
    gen = torch.Generator().manual_seed(seed)
    violations = 0
    remaining = trials
    while remaining > 0:
        n = min(chunk, remaining)
        omega = torch.randn(n, num_features, space.dim, generator=gen,
                            dtype=torch.float64)
        est = pref * torch.exp(omega @ (xs + ys)).mean(dim=-1)
        violations += int((torch.abs(est - target) > bound).sum().item())
        remaining -= n
    return violations / trials
