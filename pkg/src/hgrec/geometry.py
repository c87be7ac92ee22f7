"""Lorentz-model (hyperboloid) geometry kernels.

All computation is in torch.float64.  A point is a tensor whose last axis
has length d+1 and lies on the upper sheet {x : <x,x>_M = -K, x0 > 0};
a tangent vector at x satisfies <x,v>_M = 0.  Every function broadcasts
over leading batch axes and is differentiable w.r.t. its real inputs.
"""

from __future__ import annotations

import dataclasses
import math

import torch

__all__ = [
    "CurvatureSpace",
    "DimensionError",
    "InvalidTangentError",
    "minkowski_inner",
    "lorentz_magnitude",
    "distance",
    "project_to_tangent",
    "exp_map",
    "log_map",
    "lift",
    "unlift",
    "centroid",
    "parallel_transport",
    "hyp_matmul",
    "project_to_manifold",
    "assert_on_manifold",
    "assert_tangent",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the ambient dimension."""


class InvalidTangentError(ValueError):
    """A vector passed as tangent has negative (timelike) Minkowski norm."""


# Below this Minkowski norm, sinh(t)/t and Log are taken at their limits.
_SMALL_NORM = 1e-8
_DEGENERATE_NORM = 1e-12
# arcosh argument clamp; keeps distance and its gradient finite at x == y.
_ACOSH_FLOOR = 1.0 + 1e-15


@dataclasses.dataclass(frozen=True)
class CurvatureSpace:
    """Hyperboloid of intrinsic dimension `dim` with <x,x>_M = -curvature."""

    curvature: float
    dim: int

    def __post_init__(self):
        if not self.curvature > 0:
            raise ValueError(f"curvature must be positive, got {self.curvature}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    @property
    def sqrt_k(self) -> float:
        return math.sqrt(self.curvature)

    def origin(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """North pole (sqrt(K), 0, ..., 0)."""
        o = torch.zeros(self.ambient_dim, dtype=dtype)
        o[0] = self.sqrt_k
        return o


def _check_ambient(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise DimensionError(
            f"ambient dimensions differ: {x.shape[-1]} vs {y.shape[-1]}"
        )
    if x.shape[-1] < 2:
        raise DimensionError("ambient dimension must be at least 2")


def minkowski_inner(
    x: torch.Tensor, y: torch.Tensor, keepdim: bool = False
) -> torch.Tensor:
    """Minkowski product -x0*y0 + sum_i>=1 x_i*y_i over the last axis."""
    _check_ambient(x, y)
    prod = x * y
    res = prod[..., 1:].sum(dim=-1, keepdim=True) - prod[..., :1]
    return res if keepdim else res.squeeze(-1)


def lorentz_magnitude(
    v: torch.Tensor, keepdim: bool = False, eps: float = 1e-300
) -> torch.Tensor:
    """sqrt(|<v,v>_M|), well defined for timelike and spacelike vectors.

    The tiny clamp leaves values untouched but keeps the sqrt gradient
    finite at exactly zero vectors.
    """
    return minkowski_inner(v, v, keepdim=keepdim).abs().clamp_min(eps).sqrt()


def distance(
    space: CurvatureSpace, x: torch.Tensor, y: torch.Tensor, keepdim: bool = False
) -> torch.Tensor:
    """Geodesic distance sqrt(K) * arcosh(-<x,y>_M / K)."""
    arg = (-minkowski_inner(x, y, keepdim=keepdim) / space.curvature).clamp_min(
        _ACOSH_FLOOR
    )
    return space.sqrt_k * torch.acosh(arg)


def project_to_tangent(
    space: CurvatureSpace, x: torch.Tensor, y: torch.Tensor
) -> torch.Tensor:
    """Orthogonal projection of an ambient vector y onto the tangent space at x."""
    return y + (minkowski_inner(x, y, keepdim=True) / space.curvature) * x


def _sinhc(t: torch.Tensor) -> torch.Tensor:
    # sinh(t)/t with the removable singularity at 0 handled explicitly so that
    # neither branch produces NaN values or NaN gradients under torch.where.
    small = t < _SMALL_NORM
    safe = t.clamp_min(_SMALL_NORM)
    return torch.where(small, 1.0 + t * t / 6.0, torch.sinh(safe) / safe)


# Selftest fault injection: additive perturbation of exp_map outputs, used to
# verify that the manifold-invariant checks actually detect broken kernels.
_FAULT_OFFSET = 0.0


def set_fault_injection(offset: float) -> None:
    global _FAULT_OFFSET
    _FAULT_OFFSET = float(offset)


def exp_map(space: CurvatureSpace, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Exponential map: follow the geodesic from x with initial velocity v.

    Exp_x(v) = cosh(|v|/sqrt(K)) x + sqrt(K) sinh(|v|/sqrt(K)) v/|v|,
    returning x itself for |v| below the small-norm threshold.
    """
    _check_ambient(x, v)
    sq = minkowski_inner(v, v, keepdim=True)
    if (sq < -1e-9 * (1.0 + v.abs().amax().item() ** 2)).any():
        raise InvalidTangentError("tangent vector has timelike Minkowski norm")
    t = sq.clamp_min(1e-300).sqrt() / space.sqrt_k  # tiny clamp: finite grad at 0
    out = torch.cosh(t) * x + _sinhc(t) * v
    if _FAULT_OFFSET != 0.0:
        out = out + _FAULT_OFFSET
    return out


def log_map(space: CurvatureSpace, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Logarithmic map: tangent vector at x pointing to y with |v| = d(x,y)."""
    proj = project_to_tangent(space, x, y)
    norm = lorentz_magnitude(proj, keepdim=True)
    degenerate = norm < _DEGENERATE_NORM
    scale = distance(space, x, y, keepdim=True) / norm.clamp_min(_DEGENERATE_NORM)
    return torch.where(degenerate, torch.zeros_like(proj), scale * proj)


def lift(space: CurvatureSpace, e: torch.Tensor) -> torch.Tensor:
    """Map Euclidean features (..., d) onto the manifold via Exp at the pole."""
    if e.shape[-1] != space.dim:
        raise DimensionError(f"expected intrinsic dim {space.dim}, got {e.shape[-1]}")
    v = torch.cat([torch.zeros_like(e[..., :1]), e], dim=-1)
    o = space.origin(e.dtype).expand_as(v)
    return exp_map(space, o, v)


def unlift(space: CurvatureSpace, x: torch.Tensor) -> torch.Tensor:
    """Inverse of lift: intrinsic coordinates of Log at the pole."""
    o = space.origin(x.dtype).expand_as(x)
    return log_map(space, o, x)[..., 1:]


def centroid(
    space: CurvatureSpace,
    points: torch.Tensor,
    weights: torch.Tensor | None = None,
    dim: int = -2,
) -> torch.Tensor:
    """Closed-form weighted Lorentz centroid sqrt(K) s / sqrt(|<s,s>_M|).

    `points` stacks the set along axis `dim`; `weights`, when given, must be
    positive and broadcast against `points` without the ambient axis.
    """
    if points.shape[dim] == 0:
        raise ValueError("centroid of an empty point set")
    if weights is None:
        s = points.sum(dim=dim)
    else:
        s = (weights.unsqueeze(-1) * points).sum(dim=dim)
    return space.sqrt_k * s / lorentz_magnitude(s, keepdim=True, eps=_DEGENERATE_NORM)


def parallel_transport(
    space: CurvatureSpace, x: torch.Tensor, y: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """Transport tangent vector v from x to y along the connecting geodesic."""
    log_xy = log_map(space, x, y)
    log_yx = log_map(space, y, x)
    d2 = distance(space, x, y, keepdim=True) ** 2
    coef = minkowski_inner(log_xy, v, keepdim=True) / d2.clamp_min(_DEGENERATE_NORM)
    transported = v - coef * (log_xy + log_yx)
    return torch.where(d2 < _DEGENERATE_NORM, v, transported)


def hyp_matmul(
    space: CurvatureSpace, w: torch.Tensor, x: torch.Tensor
) -> torch.Tensor:
    """Hyperboloid matrix product Exp_o(W Log_o(x)).

    W is d x d and acts on the intrinsic tangent coordinates at the pole,
    whose leading (time) coordinate is identically zero.
    """
    if w.shape[-2:] != (space.dim, space.dim):
        raise DimensionError(
            f"expected a {space.dim}x{space.dim} matrix, got {tuple(w.shape[-2:])}"
        )
    return lift(space, unlift(space, x) @ w.transpose(-1, -2))


def project_to_manifold(space: CurvatureSpace, ambient: torch.Tensor) -> torch.Tensor:
    """Repair an ambient vector onto the hyperboloid by recomputing x0."""
    spatial = ambient[..., 1:]
    x0 = (space.curvature + (spatial * spatial).sum(-1, keepdim=True)).sqrt()
    return torch.cat([x0, spatial], dim=-1)


def manifold_defect(space: CurvatureSpace, x: torch.Tensor) -> torch.Tensor:
    """|<x,x>_M + K| for each point; zero on the manifold."""
    return (minkowski_inner(x, x) + space.curvature).abs()


def assert_on_manifold(
    space: CurvatureSpace, x: torch.Tensor, tol_scale: float = 1e-9
) -> None:
    tol = tol_scale * max(1.0, space.curvature)
    defect = manifold_defect(space, x)
    if (defect > tol).any():
        raise AssertionError(
            f"point off manifold: max |<x,x>_M + K| = {defect.max().item():.3e}"
        )
    if (x[..., 0] < space.sqrt_k - tol).any():
        raise AssertionError("point below the upper sheet (x0 < sqrt(K))")


def assert_tangent(
    space: CurvatureSpace, x: torch.Tensor, v: torch.Tensor, tol_scale: float = 1e-8
) -> None:
    bound = tol_scale * (1.0 + v.norm(dim=-1))
    err = minkowski_inner(x, v).abs()
    if (err > bound).any():
        raise AssertionError(
            f"vector not tangent: max |<x,v>_M| = {err.max().item():.3e}"
        )
