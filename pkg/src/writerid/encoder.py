"""Patch-token transformer encoder with online and momentum branches.

The online branch is encoder -> patch head -> projection head -> prediction
head; the momentum branch is a structural copy without the prediction head,
updated only by EMA (its parameters never receive gradients). Everything
runs in float64 so finite-difference gradient checks are meaningful and
forward passes are bit-reproducible.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import GradientStateError
from .matching import WeightVector
from .patches import PatchSequence
from .seeding import derive_seed

BRANCHES = ("online", "momentum")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    token_len: int = 64  # number of patch tokens, equals M
    patch_dim: int = 256  # flattened patch length P*P*C
    mlp_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if min(self.embed_dim, self.depth, self.num_heads, self.token_len, self.patch_dim) < 1:
            raise ValueError("encoder dimensions must be positive")


@dataclass(frozen=True)
class TokenSet:
    tokens: np.ndarray  # (L, D)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim**-0.5)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(round(dim * mlp_ratio))
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchTokenEncoder(nn.Module):
    """Linear patch embedding + learned positions + pre-LN transformer blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embed_dim
        self.embed = nn.Linear(config.patch_dim, d)
        self.pos = nn.Parameter(0.02 * torch.randn(1, config.token_len, d))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        x = self.embed(patches) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class PatchHead(nn.Module):
    """Mean-pool over tokens followed by a linear map; permutation invariant."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.proj(tokens.mean(dim=-2))


class MlpHead(nn.Module):
    """Stack of (linear, feature normalization) layers with GELU between them."""

    def __init__(self, dim: int, n_layers: int):
        super().__init__()
        layers: list[nn.Module] = []
        for i in range(n_layers):
            layers.append(nn.Linear(dim, dim))
            layers.append(nn.LayerNorm(dim))
            if i < n_layers - 1:
                layers.append(nn.GELU())
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class OnlineBranch(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.encoder = PatchTokenEncoder(config)
        self.patch_head = PatchHead(config.embed_dim)
        self.proj_head = MlpHead(config.embed_dim, 3)
        self.pred_head = MlpHead(config.embed_dim, 2)


class MomentumBranch(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.encoder = PatchTokenEncoder(config)
        self.patch_head = PatchHead(config.embed_dim)
        self.proj_head = MlpHead(config.embed_dim, 3)


@dataclass
class EncoderState:
    config: EncoderConfig
    online: OnlineBranch
    momentum: MomentumBranch
    step: int = 0


def init_state(config: EncoderConfig) -> EncoderState:
    """Deterministic initialization; momentum starts as an exact online copy."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, "encoder-init") % (2**63))
        online = OnlineBranch(config).double()
    momentum = MomentumBranch(config).double()
    momentum.encoder.load_state_dict(online.encoder.state_dict())
    momentum.patch_head.load_state_dict(online.patch_head.state_dict())
    momentum.proj_head.load_state_dict(online.proj_head.state_dict())
    momentum.requires_grad_(False)
    return EncoderState(config=config, online=online, momentum=momentum)


def paired_parameters(state: EncoderState):
    """(name, online_param, momentum_param) for every EMA-tracked parameter."""
    for sub in ("encoder", "patch_head", "proj_head"):
        q_mod = getattr(state.online, sub)
        k_mod = getattr(state.momentum, sub)
        k_params = dict(k_mod.named_parameters())
        for name, q_param in q_mod.named_parameters():
            yield f"{sub}.{name}", q_param, k_params[name]


def _branch_module(state: EncoderState, branch: str) -> nn.Module:
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    return state.online if branch == "online" else state.momentum


def scale_patches(patches: torch.Tensor, weights: torch.Tensor | None) -> torch.Tensor:
    """Patch-importance scaling: patch i is multiplied by M * w_i.

    Uniform weights (1/M each) therefore leave the input unscaled, matching
    the behavior when no weights are supplied.
    """
    if weights is None:
        return patches
    m = patches.shape[-2]
    if weights.shape[-1] != m:
        raise ValueError(f"weight length {weights.shape[-1]} != patch count {m}")
    return patches * (m * weights).unsqueeze(-1)


def encode_tokens(
    patches: torch.Tensor, weights: torch.Tensor | None, module: nn.Module
) -> torch.Tensor:
    """Torch-level encode: (B, M, F) patches -> (B, M, D) tokens."""
    return module.encoder(scale_patches(patches, weights))


def _as_weight_tensor(weights) -> torch.Tensor | None:
    if weights is None:
        return None
    if isinstance(weights, WeightVector):
        weights = weights.w
    return torch.as_tensor(np.asarray(weights, dtype=np.float64))


def encode(
    seq: PatchSequence,
    weights=None,
    branch: str = "online",
    state: EncoderState | None = None,
) -> TokenSet:
    """Encode one patch sequence into an L x D token set (no gradient)."""
    if state is None:
        raise ValueError("encode requires an EncoderState")
    module = _branch_module(state, branch)
    patches = torch.as_tensor(seq.patches, dtype=torch.float64).unsqueeze(0)
    w = _as_weight_tensor(weights)
    if w is not None:
        w = w.unsqueeze(0)
    with torch.no_grad():
        tokens = encode_tokens(patches, w, module)
    return TokenSet(tokens=tokens.squeeze(0).numpy())


def head_embedding(tokens: torch.Tensor, module: nn.Module, branch: str) -> torch.Tensor:
    """L2-normalized head output; online applies the prediction head, momentum does not."""
    h = module.proj_head(module.patch_head(tokens))
    if branch == "online":
        h = module.pred_head(h)
    return F.normalize(h, dim=-1)


def head_forward(tokens: TokenSet, branch: str, state: EncoderState) -> np.ndarray:
    """Numpy wrapper over head_embedding for a single token set."""
    module = _branch_module(state, branch)
    t = torch.as_tensor(tokens.tokens, dtype=torch.float64).unsqueeze(0)
    with torch.no_grad():
        out = head_embedding(t, module, branch)
    return out.squeeze(0).numpy()


def gradients(state: EncoderState) -> dict[str, np.ndarray]:
    """Per-parameter gradients of the online branch after a backward pass."""
    grads = {}
    any_grad = False
    for name, param in state.online.named_parameters():
        if param.grad is not None:
            any_grad = True
            grads[name] = param.grad.detach().clone().numpy()
        else:
            grads[name] = np.zeros(param.shape, dtype=np.float64)
    if not any_grad:
        raise GradientStateError("gradients requested but no backward pass has been recorded")
    return grads
