"""Token projection: compress n visual tokens to n_hat and lift channels to
the language model width.

The main projector is a pair of mixer sublayers. The first normalizes and
mixes along the token axis of the transposed input, shrinking n to n_hat with
channels untouched; the second normalizes and mixes along channels, mapping d
to d_hat. Activations are GELU. Both sublayers are plain two-matrix MLPs, so
the cost is linear in the number of input tokens. Shapes forbid residual
connections across the dimension-changing sublayers, and there are none.

Linear and plain-MLP projectors are provided as ablation baselines behind the
same call signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import VisualTokens
from .errors import ConfigError, InputValidationError, ShapeMismatchError


@dataclass
class MixerConfig:
    n: int
    n_hat: int
    d: int
    d_hat: int
    token_expansion: float = 2.0
    channel_expansion: float = 2.0

    def __post_init__(self):
        if self.n_hat >= self.n:
            raise ConfigError(f"projector must compress tokens, got n={self.n} n_hat={self.n_hat}")

    @property
    def token_hidden(self) -> int:
        return int(self.token_expansion * self.n_hat)

    @property
    def channel_hidden(self) -> int:
        return int(self.channel_expansion * self.d)

    @classmethod
    def paper(cls, d: int = 768) -> "MixerConfig":
        # 2048 tokens compressed to 512, channels lifted to 2048
        return cls(n=2048, n_hat=512, d=d, d_hat=2048)

    @classmethod
    def toy(cls) -> "MixerConfig":
        return cls(n=256, n_hat=64, d=64, d_hat=128)


class TokenProjector(nn.Module):
    """Two stacked mixer sublayers: token reduction, then channel mapping."""

    def __init__(self, cfg: MixerConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_tokens = nn.LayerNorm(cfg.n)
        self.w1 = nn.Linear(cfg.n, cfg.token_hidden)
        self.w2 = nn.Linear(cfg.token_hidden, cfg.n_hat)
        self.norm_channels = nn.LayerNorm(cfg.d)
        self.w3 = nn.Linear(cfg.d, cfg.channel_hidden)
        self.w4 = nn.Linear(cfg.channel_hidden, cfg.d_hat)
        self.act = nn.GELU()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if tokens.shape != (cfg.n, cfg.d):
            raise ConfigError(
                f"projector expects {(cfg.n, cfg.d)} tokens, got {tuple(tokens.shape)}"
            )
        # token mixing on the transposed matrix: (d, n) -> (d, n_hat)
        u_t = self.w2(self.act(self.w1(self.norm_tokens(tokens.T))))
        u = u_t.T  # (n_hat, d)
        out = self.w4(self.act(self.w3(self.norm_channels(u))))
        if not torch.isfinite(out).all():
            raise InputValidationError("projector produced NaN or Inf")
        return out


class LinearProjector(nn.Module):
    """Ablation baseline: linear token reduction + linear channel map."""

    def __init__(self, cfg: MixerConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = nn.Linear(cfg.n, cfg.n_hat)
        self.channels = nn.Linear(cfg.d, cfg.d_hat)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape != (self.cfg.n, self.cfg.d):
            raise ConfigError(f"expected {(self.cfg.n, self.cfg.d)}, got {tuple(tokens.shape)}")
        return self.channels(self.tokens(tokens.T).T)


class MLPProjector(nn.Module):
    """Ablation baseline: linear token reduction + 2-layer channel MLP."""

    def __init__(self, cfg: MixerConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = nn.Linear(cfg.n, cfg.n_hat)
        self.channels = nn.Sequential(
            nn.Linear(cfg.d, cfg.channel_hidden),
            nn.GELU(),
            nn.Linear(cfg.channel_hidden, cfg.d_hat),
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape != (self.cfg.n, self.cfg.d):
            raise ConfigError(f"expected {(self.cfg.n, self.cfg.d)}, got {tuple(tokens.shape)}")
        return self.channels(self.tokens(tokens.T).T)


PROJECTOR_KINDS = {"mixer": TokenProjector, "linear": LinearProjector, "mlp": MLPProjector}


def build_projector(kind: str, cfg: MixerConfig) -> nn.Module:
    if kind not in PROJECTOR_KINDS:
        raise ConfigError(f"unknown projector kind {kind!r}")
    return PROJECTOR_KINDS[kind](cfg)


def project_tokens(v: VisualTokens, projector: nn.Module) -> torch.Tensor:
    """Apply a projector to encoder output; returns the n_hat x d_hat matrix."""
    if v.tokens.ndim != 2:
        raise ShapeMismatchError(f"expected a 2D token matrix, got {tuple(v.tokens.shape)}")
    return projector(v.tokens)
