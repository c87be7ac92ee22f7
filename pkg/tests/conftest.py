import numpy as np
import pytest
import torch

from hgrec.geometry import CurvatureSpace
from hgrec import geometry


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def space():
    return CurvatureSpace(1.0, 3)


def random_points(space, n, seed, max_radius=1.5):
    """Random manifold points at bounded geodesic radius from the pole."""
    gen = torch.Generator().manual_seed(seed)
    e = torch.randn(n, space.dim, generator=gen, dtype=torch.float64)
    radius = max_radius * torch.rand(n, 1, generator=gen, dtype=torch.float64)
    e = e * radius / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return geometry.lift(space, e)


def point_with_spatial_norm(space, norm, seed):
    """A manifold point whose spatial part has the given Euclidean norm."""
    gen = torch.Generator().manual_seed(seed)
    s = torch.randn(space.dim, generator=gen, dtype=torch.float64)
    s = s * norm / s.norm()
    x0 = torch.sqrt(space.curvature + (s * s).sum()).reshape(1)
    return torch.cat([x0, s])
