"""Built-in self checks: randomized geometry properties, kernel-estimator
oracles, and a small end-to-end gradient check.  Each check returns
(name, passed, detail) so the CLI can report the first failure."""

from __future__ import annotations

import math

import numpy as np
import torch

from . import attention, geometry, synthetic
from .attention import AttentionConfig, RandomFeatureMap
from .geometry import CurvatureSpace
from .model import LossConfig, ModelState
from .training import gradient_check

__all__ = ["run_all", "geometry_checks", "oracle_checks", "gradient_checks"]

_SPACES = [
    CurvatureSpace(k, d) for d in (2, 8, 64) for k in (0.1, 0.5, 1.0)
]


def _random_points(space, n, gen, max_radius=None):
    """Uniform directions at geodesic radius in (0, max_radius] from the pole.

    The radius is capped proportionally to sqrt(K) (the curvature radius):
    coordinates grow like cosh(r / sqrt(K)), so unbounded sampling loses all
    float64 precision in low-curvature, high-dimension spaces.
    """
    if max_radius is None:
        max_radius = 2.0 * space.sqrt_k
    e = torch.randn(n, space.dim, generator=gen, dtype=torch.float64)
    radius = max_radius * torch.rand(n, 1, generator=gen, dtype=torch.float64)
    e = e * radius / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return geometry.lift(space, e)


def _random_tangents(space, x, gen, scale=1.0):
    ambient = scale * torch.randn(*x.shape, generator=gen, dtype=torch.float64)
    return geometry.project_to_tangent(space, x, ambient)


def geometry_checks(cases_per_op: int = 2000, seed: int = 0):
    """Manifold closure, exp/log inversion, metric axioms, transport isometry."""
    gen = torch.Generator().manual_seed(seed)
    results = []
    for space in _SPACES:
        n = cases_per_op
        x = _random_points(space, n, gen)
        y = _random_points(space, n, gen)
        z = _random_points(space, n, gen)
        tol = 1e-9 * max(1.0, space.curvature)
        tag = f"d={space.dim},K={space.curvature}"

        defect = geometry.manifold_defect(space, x).max().item()
        results.append((f"manifold-closure-lift[{tag}]", defect <= tol,
                        f"max defect {defect:.2e}"))

        v = _random_tangents(space, x, gen)
        # Rescale tangent norms into (0, 3 sqrt(K)]: long enough to exercise
        # real geodesics, short enough to stay in the well-conditioned region.
        norms = geometry.lorentz_magnitude(v, keepdim=True)
        target = 3.0 * space.sqrt_k * torch.rand(
            n, 1, generator=gen, dtype=torch.float64
        )
        v = v * target / norms.clamp_min(1e-12)
        ex = geometry.exp_map(space, x, v)
        defect = geometry.manifold_defect(space, ex).max().item()
        results.append((f"manifold-closure-exp[{tag}]", defect <= tol,
                        f"max defect {defect:.2e}"))

        back = geometry.log_map(space, x, ex)
        err = ((back - v).norm(dim=-1) / (1.0 + v.norm(dim=-1))).max().item()
        results.append((f"exp-log-inversion[{tag}]", err <= 1e-7,
                        f"max rel err {err:.2e}"))

        fwd = geometry.exp_map(space, x, geometry.log_map(space, x, y))
        err = ((fwd - y).norm(dim=-1) / (1.0 + y.norm(dim=-1))).max().item()
        results.append((f"log-exp-inversion[{tag}]", err <= 1e-7,
                        f"max rel err {err:.2e}"))

        dxy = geometry.distance(space, x, y)
        dyx = geometry.distance(space, y, x)
        sym = (dxy - dyx).abs().max().item()
        dxx = geometry.distance(space, x, x).max().item()
        tri = (geometry.distance(space, x, z)
               - dxy - geometry.distance(space, y, z)).max().item()
        ok = sym <= 1e-9 and dxx <= 1e-6 and tri <= 1e-9
        results.append((f"distance-axioms[{tag}]", ok,
                        f"sym {sym:.2e} diag {dxx:.2e} tri {tri:.2e}"))

        u1 = _random_tangents(space, x, gen)
        u2 = _random_tangents(space, x, gen)
        p1 = geometry.parallel_transport(space, x, y, u1)
        p2 = geometry.parallel_transport(space, x, y, u2)
        before = geometry.minkowski_inner(u1, u2)
        after = geometry.minkowski_inner(p1, p2)
        err = ((before - after).abs() / (1.0 + before.abs())).max().item()
        results.append((f"transport-isometry[{tag}]", err <= 1e-8,
                        f"max rel err {err:.2e}"))
    return results


def oracle_checks(seed: int = 0):
    """Kernel-estimator identities and linear-vs-exact agreement."""
    results = []
    gen = torch.Generator().manual_seed(seed)
    space = CurvatureSpace(1.0, 6)

    # Algebraic identity: prefactor * Gaussian MGF == HSM, pair by pair.
    x = _random_points(space, 20, gen, max_radius=0.7)
    y = _random_points(space, 20, gen, max_radius=0.7)
    z2 = ((x[:, 1:] + y[:, 1:]) ** 2).sum(-1)
    pref = torch.exp((-(x[:, 0] + y[:, 0]) ** 2 + 2 * space.curvature) / 2)
    closed = pref * torch.exp(z2 / 2)
    target = attention.hsm(x, y)
    err = ((closed - target).abs() / target).max().item()
    results.append(("estimator-closed-form-identity", err <= 1e-10,
                    f"max rel err {err:.2e}"))

    # Monte Carlo estimator converges to the kernel.
    est = attention.mc_kernel_estimate(space, x[0], y[0], 200_000, seed=seed + 1)
    tgt = target[0].item()
    rel = abs(est - tgt) / tgt
    results.append(("estimator-mc-convergence", rel <= 0.05,
                    f"rel err {rel:.3f} at 2e5 samples"))

    # Linear path tracks the factorized-kernel softmax on a small instance.
    emb_q = 0.4 * torch.randn(16, space.dim, generator=gen, dtype=torch.float64)
    emb_k = 0.4 * torch.randn(16, space.dim, generator=gen, dtype=torch.float64)
    q = geometry.lift(space, emb_q)
    k = geometry.lift(space, emb_k)
    f = attention.factorized_kernel(q.unsqueeze(1), k.unsqueeze(0))
    w_oracle = f / f.sum(1, keepdim=True)
    rf = RandomFeatureMap.draw(space.dim, 4096, seed + 2)
    phi_q = attention.phi(space, q, rf)
    phi_k = attention.phi(space, k, rf)
    approx = phi_q @ phi_k.T
    w_lin = approx / approx.sum(1, keepdim=True)
    mae = (w_lin - w_oracle).abs().mean().item()
    results.append(("linear-weights-match-oracle", mae <= 0.01,
                    f"mean abs err {mae:.4f}"))
    return results


def gradient_checks(seed: int = 0):
    g = synthetic.generate_synthetic(
        num_users=5, num_items=5, num_clusters=2, mean_degree=3, seed=seed
    )
    space = CurvatureSpace(1.0, 4)
    state = ModelState(
        5, 5, space, num_layers=2, attn=AttentionConfig(heads=2),
        alpha=0.4, seed=seed,
    )
    report = gradient_check(state, g, LossConfig(margin=0.5), samples=100,
                            seed=seed)
    err = report["max_rel_error"]
    return [("pipeline-gradient-check", err <= 1e-4, f"max rel err {err:.2e}")]


def run_all(seed: int = 0, geometry_cases: int = 2000):
    results = []
    results.extend(geometry_checks(cases_per_op=geometry_cases, seed=seed))
    results.extend(oracle_checks(seed=seed))
    results.extend(gradient_checks(seed=seed))
    return results
