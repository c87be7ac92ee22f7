"""Model assembly: Euclidean embedding tables lifted onto the hyperboloid,
a local graph-convolution branch, a global cross-attention branch, and
tangent-space fusion of the two.  Parameters stay Euclidean; manifold
points are derived every forward pass, never stored."""

from __future__ import annotations

import dataclasses
import io
import struct

import numpy as np
import torch

from . import attention, geometry, graph as graph_mod
from .attention import AttentionConfig, HeadParams, NormParams, RandomFeatureMap
from .geometry import CurvatureSpace

__all__ = [
    "LossConfig",
    "ModelState",
    "forward",
    "margin_loss",
    "sample_negative",
    "sample_negatives",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"HGF1"


@dataclasses.dataclass
class LossConfig:
    margin: float = 0.5
    negatives_per_positive: int = 1

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")


class ModelState(torch.nn.Module):
    """All trainable parameters plus the fixed hyperparameters.

    Trainable: user/item embedding tables, per-head per-direction projection
    matrices, and the normalization parameters gamma and beta_param.  The
    fusion weight alpha and the margin are hyperparameters.
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        space: CurvatureSpace,
        num_layers: int,
        attn: AttentionConfig,
        alpha: float,
        margin: float = 0.5,
        init_scale: float = 0.1,
        seed: int = 0,
    ):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        self.num_users = num_users
        self.num_items = num_items
        self.space = space
        self.num_layers = num_layers
        self.attn = attn
        self.alpha = float(alpha)
        self.margin = float(margin)
        d, h = space.dim, attn.heads
        gen = torch.Generator().manual_seed(seed)

        def _init(*shape, scale):
            return torch.nn.Parameter(
                scale * torch.randn(*shape, generator=gen, dtype=torch.float64)
            )

        eye = torch.eye(d, dtype=torch.float64).expand(h, d, d).clone()
        self.user_emb = _init(num_users, d, scale=init_scale)
        self.item_emb = _init(num_items, d, scale=init_scale)
        # Head matrices start near the identity so early attention outputs
        # stay close to the raw embeddings.
        proj_noise = 0.05
        self.w_query = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.w_key = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.w_value = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.w_query_rev = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.w_key_rev = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.w_value_rev = torch.nn.Parameter(
            eye + proj_noise * torch.randn(h, d, d, generator=gen, dtype=torch.float64)
        )
        self.gamma = torch.nn.Parameter(torch.ones(d, dtype=torch.float64))
        # Started slightly off the pole: at beta exactly o the o->beta
        # transport sits on its degenerate branch, where the autograd
        # gradient is only a one-sided limit.
        self.beta_param = torch.nn.Parameter(
            0.01 * torch.randn(d, generator=gen, dtype=torch.float64)
        )

    def head_params(self) -> HeadParams:
        return HeadParams(
            w_query=self.w_query,
            w_key=self.w_key,
            w_value=self.w_value,
            w_query_rev=self.w_query_rev,
            w_key_rev=self.w_key_rev,
            w_value_rev=self.w_value_rev,
        )

    def norm_params(self) -> NormParams:
        return NormParams(gamma=self.gamma, beta_param=self.beta_param)


def _global_branch(
    state: ModelState,
    users: torch.Tensor,
    items: torch.Tensor,
    rf: RandomFeatureMap | None,
):
    cfg = state.attn
    heads = state.head_params()
    space = state.space
    if cfg.mode == "linear":
        if rf is None:
            raise ValueError("linear attention requires a RandomFeatureMap")
        u_heads = attention.linear_cross_attention(
            space, cfg, heads, rf, users, items, direction="user"
        )
        i_heads = attention.linear_cross_attention(
            space, cfg, heads, rf, users, items, direction="item"
        )
    else:
        u_heads = attention.exact_cross_attention(
            space, cfg, heads, users, items, direction="user"
        )
        i_heads = attention.exact_cross_attention(
            space, cfg, heads, users, items, direction="item"
        )
    u_glob = attention.aggregate_heads(space, u_heads)
    i_glob = attention.aggregate_heads(space, i_heads)
    # One normalization over the concatenated user+item set: a single
    # centroid and variance, then split back.
    both = torch.cat([u_glob, i_glob], dim=0)
    both = attention.hyperbolic_normalize(space, both, state.norm_params())
    return both[: users.shape[0]], both[users.shape[0]:]


def forward(
    state: ModelState,
    g: graph_mod.BipartiteGraph,
    rf: RandomFeatureMap | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full pipeline: lift, local + global branches, tangent-space fusion."""
    if g.num_users != state.num_users or g.num_items != state.num_items:
        raise ValueError(
            f"graph size ({g.num_users}, {g.num_items}) does not match model "
            f"({state.num_users}, {state.num_items})"
        )
    space = state.space
    users = geometry.lift(space, state.user_emb)
    items = geometry.lift(space, state.item_emb)
    alpha = state.alpha
    if alpha == 0.0:
        return graph_mod.lhgcn_forward(space, g, users, items, state.num_layers)
    u_glob, i_glob = _global_branch(state, users, items, rf)
    if alpha == 1.0:
        return u_glob, i_glob
    u_loc, i_loc = graph_mod.lhgcn_forward(space, g, users, items, state.num_layers)

    def fuse(glob, loc):
        blended = alpha * geometry.unlift(space, glob) + (1.0 - alpha) * (
            geometry.unlift(space, loc)
        )
        return geometry.lift(space, blended)

    return fuse(u_glob, u_loc), fuse(i_glob, i_loc)


def margin_loss(
    space: CurvatureSpace,
    u: torch.Tensor,
    i_pos: torch.Tensor,
    i_neg: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """Hinge on squared distances: max(d(u,i+)^2 - d(u,i-)^2 + margin, 0).

    Elementwise over broadcast batches; the subgradient at the kink is 0,
    so satisfied pairs stay inert.
    """
    d_pos = geometry.distance(space, u, i_pos)
    d_neg = geometry.distance(space, u, i_neg)
    return torch.relu(d_pos * d_pos - d_neg * d_neg + margin)


def sample_negative(g: graph_mod.BipartiteGraph, user: int, rng) -> int:
    """Uniform draw over the items this user has not interacted with."""
    interacted = set(int(i) for i in g.user_items(user))
    if len(interacted) >= g.num_items:
        raise RuntimeError(f"user {user} interacted with every item")
    while True:
        candidate = int(rng.integers(g.num_items))
        if candidate not in interacted:
            return candidate


def sample_negatives(
    g: graph_mod.BipartiteGraph, users: np.ndarray, per_positive: int, rng
) -> np.ndarray:
    """(len(users), per_positive) negatives via per-user rejection sampling."""
    out = np.empty((len(users), per_positive), dtype=np.int64)
    for row, u in enumerate(users):
        for col in range(per_positive):
            out[row, col] = sample_negative(g, int(u), rng)
    return out


def save_checkpoint(state: ModelState, path) -> None:
    """Binary checkpoint: magic "HGF1", little-endian int64 N, M, d, H, L,
    float64 K, alpha, margin, then row-major float64 parameter blocks."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(
        struct.pack(
            "<5q",
            state.num_users,
            state.num_items,
            state.space.dim,
            state.attn.heads,
            state.num_layers,
        )
    )
    buf.write(
        struct.pack("<3d", state.space.curvature, state.alpha, state.margin)
    )
    for block in _parameter_blocks(state):
        buf.write(block.detach().numpy().astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _parameter_blocks(state: ModelState):
    yield state.user_emb
    yield state.item_emb
    for h in range(state.attn.heads):
        yield state.w_query[h]
        yield state.w_key[h]
        yield state.w_value[h]
        yield state.w_query_rev[h]
        yield state.w_key_rev[h]
        yield state.w_value_rev[h]
    yield state.gamma
    yield state.beta_param


def load_checkpoint(path, attn: AttentionConfig | None = None) -> ModelState:
    """Rebuild a ModelState from `save_checkpoint` output.

    `attn` supplies the non-serialized attention settings (similarity,
    temperature, mode); its head count must agree with the file.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    n, m, d, h, layers = struct.unpack_from("<5q", data, 4)
    k, alpha, margin = struct.unpack_from("<3d", data, 4 + 40)
    if attn is None:
        attn = AttentionConfig(heads=h)
    elif attn.heads != h:
        raise ValueError(f"checkpoint has {h} heads, config asks for {attn.heads}")
    state = ModelState(
        num_users=n,
        num_items=m,
        space=CurvatureSpace(curvature=k, dim=d),
        num_layers=layers,
        attn=attn,
        alpha=alpha,
        margin=margin,
    )
    offset = 4 + 40 + 24
    expected = offset + 8 * sum(b.numel() for b in _parameter_blocks(state))
    if len(data) != expected:
        raise ValueError(
            f"{path}: truncated checkpoint ({len(data)} bytes, expected {expected})"
        )
    with torch.no_grad():
        for block in _parameter_blocks(state):
            count = block.numel()
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            block.copy_(torch.from_numpy(arr.copy()).view(block.shape))
            offset += 8 * count
    return state
