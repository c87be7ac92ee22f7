import math

import pytest
import torch

from hgrec import attention, geometry
from hgrec.attention import (
    AttentionConfig,
    HeadParams,
    NormParams,
    NumericalDegeneracyError,
    RandomFeatureMap,
)
from hgrec.counters import counters
from hgrec.geometry import CurvatureSpace

from conftest import point_with_spatial_norm, random_points


@pytest.fixture
def space():
    return CurvatureSpace(1.0, 4)


def identity_heads(dim, num_heads=1, noise=0.0, seed=0):
    gen = torch.Generator().manual_seed(seed)
    eye = torch.eye(dim, dtype=torch.float64).expand(num_heads, dim, dim)
    mats = [
        eye + noise * torch.randn(num_heads, dim, dim, generator=gen,
                                  dtype=torch.float64)
        for _ in range(6)
    ]
    return HeadParams(*mats)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AttentionConfig(heads=0)
        with pytest.raises(ValueError):
            AttentionConfig(temperature=0.0)
        with pytest.raises(ValueError):
            AttentionConfig(similarity="cosine")
        with pytest.raises(ValueError):
            AttentionConfig(mode="quadratic")

    def test_feature_map_draw_is_seeded(self):
        a = RandomFeatureMap.draw(4, 16, seed=3)
        b = RandomFeatureMap.draw(4, 16, seed=3)
        assert torch.equal(a.omega, b.omega)


class TestExactAttention:
    def test_output_shape_and_manifold(self, space):
        users = random_points(space, 5, seed=0)
        items = random_points(space, 7, seed=1)
        heads = identity_heads(space.dim, num_heads=3, noise=0.05)
        out = attention.exact_cross_attention(
            space, AttentionConfig(heads=3), heads, users, items
        )
        assert out.shape == (3, 5, space.ambient_dim)
        geometry.assert_on_manifold(space, out)

    def test_weights_are_a_distribution(self, space):
        users = random_points(space, 5, seed=2)
        items = random_points(space, 6, seed=3)
        heads = identity_heads(space.dim)
        _, w = attention.exact_cross_attention(
            space, AttentionConfig(), heads, users, items, return_weights=True
        )
        assert (w > 0).all()
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)))

    def test_item_direction_swaps_roles(self, space):
        users = random_points(space, 5, seed=4)
        items = random_points(space, 6, seed=5)
        heads = identity_heads(space.dim, noise=0.05)
        out = attention.exact_cross_attention(
            space, AttentionConfig(), heads, users, items, direction="item"
        )
        assert out.shape == (1, 6, space.ambient_dim)

    def test_hsm_logits_match_manual_softmax(self, space):
        users = random_points(space, 3, seed=6)
        items = random_points(space, 4, seed=7)
        heads = identity_heads(space.dim)
        _, w = attention.exact_cross_attention(
            space, AttentionConfig(temperature=0.7), heads, users, items,
            return_weights=True,
        )
        logits = geometry.minkowski_inner(
            users.unsqueeze(1), items.unsqueeze(0)
        ) / 0.7
        assert torch.allclose(w[0], torch.softmax(logits, dim=-1), atol=1e-12)

    def test_distance_similarity_prefers_nearby_keys(self, space):
        users = random_points(space, 1, seed=8)
        items = torch.stack([users[0], random_points(space, 1, seed=9)[0]])
        heads = identity_heads(space.dim)
        cfg = AttentionConfig(similarity="distance", sim_scale=2.0)
        _, w = attention.exact_cross_attention(
            space, cfg, heads, users, items, return_weights=True
        )
        assert w[0, 0, 0] > w[0, 0, 1]

    def test_single_key_collapses_to_value(self, space):
        users = random_points(space, 4, seed=10)
        items = random_points(space, 1, seed=11)
        heads = identity_heads(space.dim)
        out = attention.exact_cross_attention(
            space, AttentionConfig(), heads, users, items
        )
        assert torch.allclose(out[0], items.expand_as(out[0]), atol=1e-9)

    def test_empty_keys_rejected(self, space):
        users = random_points(space, 2, seed=12)
        empty = torch.zeros(0, space.ambient_dim, dtype=torch.float64)
        with pytest.raises(ValueError):
            attention.exact_cross_attention(
                space, AttentionConfig(), identity_heads(space.dim), users, empty
            )


class TestLinearAttention:
    def test_matches_factorized_softmax_closely(self, space):
        users = random_points(space, 8, seed=13, max_radius=0.6)
        items = random_points(space, 9, seed=14, max_radius=0.6)
        heads = identity_heads(space.dim)
        rf = RandomFeatureMap.draw(space.dim, 8192, seed=0)
        cfg = AttentionConfig(mode="linear", feature_dim=8192)
        _, w = attention.linear_cross_attention(
            space, cfg, heads, rf, users, items, return_weights=True
        )
        f = attention.factorized_kernel(users.unsqueeze(1), items.unsqueeze(0))
        w_oracle = f / f.sum(-1, keepdim=True)
        assert (w[0] - w_oracle).abs().mean().item() < 0.01

    def test_weights_sum_to_one(self, space):
        users = random_points(space, 5, seed=15)
        items = random_points(space, 6, seed=16)
        rf = RandomFeatureMap.draw(space.dim, 64, seed=1)
        cfg = AttentionConfig(mode="linear", feature_dim=64)
        _, w = attention.linear_cross_attention(
            space, cfg, heads=identity_heads(space.dim), rf=rf,
            users=users, items=items, return_weights=True,
        )
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-12)

    def test_output_on_manifold(self, space):
        users = random_points(space, 5, seed=17)
        items = random_points(space, 6, seed=18)
        rf = RandomFeatureMap.draw(space.dim, 128, seed=2)
        out = attention.linear_cross_attention(
            space, AttentionConfig(mode="linear", feature_dim=128),
            identity_heads(space.dim), rf, users, items,
        )
        geometry.assert_on_manifold(space, out)

    def test_requires_hsm_similarity(self, space):
        users = random_points(space, 2, seed=19)
        items = random_points(space, 2, seed=20)
        rf = RandomFeatureMap.draw(space.dim, 8, seed=3)
        cfg = AttentionConfig(mode="linear", similarity="distance")
        with pytest.raises(ValueError):
            attention.linear_cross_attention(
                space, cfg, identity_heads(space.dim), rf, users, items
            )

    def test_clamp_counter_increments_for_extreme_inputs(self, space):
        # On-manifold points cannot reach the ceiling (the -x0^2/2 prefactor
        # always dominates), so feed a raw ambient vector with a small time
        # coordinate and a huge spatial part.
        counters.reset()
        bad = torch.cat(
            [
                torch.ones(2, 1, dtype=torch.float64),
                200.0 * torch.ones(2, space.dim, dtype=torch.float64),
            ],
            dim=-1,
        )
        rf = RandomFeatureMap.draw(space.dim, 32, seed=4)
        phi = attention.phi(space, bad, rf)
        assert torch.isfinite(phi).all()
        assert counters.feature_clamp_events > 0

    def test_degenerate_denominator_names_query(self, space):
        # Push queries so deep that every feature underflows to zero.
        users = geometry.lift(
            space, -40.0 * torch.ones(3, space.dim, dtype=torch.float64)
        )
        items = random_points(space, 4, seed=21)
        rf = RandomFeatureMap.draw(space.dim, 16, seed=5)
        with pytest.raises(NumericalDegeneracyError, match="query index"):
            attention.linear_cross_attention(
                space, AttentionConfig(mode="linear", feature_dim=16),
                identity_heads(space.dim), rf, users, items,
            )


class TestHeadAggregation:
    def test_identical_heads_pass_through(self, space):
        x = random_points(space, 5, seed=22)
        stacked = x.unsqueeze(0).expand(3, -1, -1)
        out = attention.aggregate_heads(space, stacked)
        assert torch.allclose(out, x, atol=1e-12)

    def test_output_on_manifold(self, space):
        per_head = torch.stack(
            [random_points(space, 5, seed=s) for s in (23, 24, 25)]
        )
        out = attention.aggregate_heads(space, per_head)
        geometry.assert_on_manifold(space, out)


class TestNormalization:
    def _params(self, space, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return NormParams(
            gamma=torch.ones(space.dim, dtype=torch.float64),
            beta_param=0.1 * torch.randn(space.dim, generator=gen,
                                         dtype=torch.float64),
        )

    def test_output_on_manifold(self, space):
        x = random_points(space, 10, seed=26)
        out = attention.hyperbolic_normalize(space, x, self._params(space))
        geometry.assert_on_manifold(space, out)

    def test_centers_near_shift_point(self, space):
        # After normalization the centroid should sit near beta: centering
        # removes the mean, and Exp_beta re-anchors there.
        x = random_points(space, 200, seed=27, max_radius=0.5)
        params = self._params(space)
        out = attention.hyperbolic_normalize(space, x, params)
        beta = geometry.lift(space, params.beta_param)
        c = geometry.centroid(space, out)
        assert geometry.distance(space, c, beta).item() < 0.25

    def test_gamma_scales_spread(self, space):
        x = random_points(space, 50, seed=28)
        small = NormParams(
            gamma=0.1 * torch.ones(space.dim, dtype=torch.float64),
            beta_param=torch.zeros(space.dim, dtype=torch.float64),
        )
        big = NormParams(
            gamma=torch.ones(space.dim, dtype=torch.float64),
            beta_param=torch.zeros(space.dim, dtype=torch.float64),
        )
        def spread(params):
            out = attention.hyperbolic_normalize(space, x, params)
            mu = geometry.centroid(space, out)
            return geometry.distance(space, out, mu).mean().item()
        assert spread(small) < 0.2 * spread(big)

    def test_empty_input_rejected(self, space):
        with pytest.raises(ValueError):
            attention.hyperbolic_normalize(
                space,
                torch.zeros(0, space.ambient_dim, dtype=torch.float64),
                self._params(space),
            )


class TestKernelOracles:
    def test_hsm_range_on_manifold(self, space):
        x = random_points(space, 10, seed=29)
        y = random_points(space, 10, seed=30)
        vals = attention.hsm(x, y)
        assert (vals > 0).all()
        # <x,y>_M <= -K on the sheet, so hsm <= exp(-K).
        assert (vals <= math.exp(-space.curvature) + 1e-12).all()

    def test_closed_form_identity(self):
        space = CurvatureSpace(1.0, 6)
        for seed in range(10):
            x = point_with_spatial_norm(space, 0.8, seed=seed)
            y = point_with_spatial_norm(space, 1.1, seed=100 + seed)
            z2 = ((x[1:] + y[1:]) ** 2).sum()
            pref = math.exp((-((x[0] + y[0]).item() ** 2) + 2.0) / 2.0)
            closed = pref * math.exp(z2.item() / 2.0)
            target = attention.hsm(x, y).item()
            assert closed == pytest.approx(target, rel=1e-10)

    def test_mc_estimate_converges(self):
        space = CurvatureSpace(1.0, 6)
        x = point_with_spatial_norm(space, 0.7, seed=1)
        y = point_with_spatial_norm(space, 0.9, seed=2)
        est = attention.mc_kernel_estimate(space, x, y, 400_000, seed=0)
        target = attention.hsm(x, y).item()
        assert est == pytest.approx(target, rel=0.05)

    def test_factorized_kernel_is_feature_map_mean(self):
        space = CurvatureSpace(1.0, 4)
        x = point_with_spatial_norm(space, 0.6, seed=3)
        y = point_with_spatial_norm(space, 0.5, seed=4)
        rf = RandomFeatureMap.draw(space.dim, 200_000, seed=6)
        est = (attention.phi(space, x, rf) * attention.phi(space, y, rf)).sum()
        target = attention.factorized_kernel(x, y)
        assert est.item() == pytest.approx(target.item(), rel=0.05)

    def test_factorized_vs_hsm_bias_factor(self):
        # F exceeds HSM exactly by exp(x0 * y0): the factorization drops the
        # negative time-coordinate product from the Minkowski inner product.
        space = CurvatureSpace(1.0, 4)
        x = point_with_spatial_norm(space, 0.9, seed=7)
        y = point_with_spatial_norm(space, 0.4, seed=8)
        ratio = attention.factorized_kernel(x, y) / attention.hsm(x, y)
        assert ratio.item() == pytest.approx(
            math.exp((x[0] * y[0]).item()), rel=1e-12
        )

    def test_bound_check_rejects_out_of_range_points(self):
        space = CurvatureSpace(1.0, 4)
        x = point_with_spatial_norm(space, 5.0, seed=9)
        with pytest.raises(ValueError):
            attention.kernel_error_bound_check(
                space, x, x, 16, 0.1, space.curvature + 4.0, 100, seed=0
            )

    def test_bound_violation_rate_small(self):
        space = CurvatureSpace(1.0, 6)
        x = point_with_spatial_norm(space, 1.0, seed=10)
        y = point_with_spatial_norm(space, 0.8, seed=11)
        frac = attention.kernel_error_bound_check(
            space, x, y, 64, 0.1, space.curvature + 4.0, 2000, seed=1
        )
        assert frac <= 0.1


class TestCounters:
    def test_exact_counter_formula(self, space):
        counters.reset()
        users = random_points(space, 5, seed=31)
        items = random_points(space, 7, seed=32)
        attention.exact_cross_attention(
            space, AttentionConfig(heads=2), identity_heads(space.dim, 2),
            users, items,
        )
        assert counters.exact_attention_madds == 2 * 2 * 5 * 7 * space.ambient_dim

    def test_counters_reset(self, space):
        counters.reset()
        assert counters.exact_attention_madds == 0
        assert counters.linear_attention_madds == 0
        assert counters.feature_clamp_events == 0
