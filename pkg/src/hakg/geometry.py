"""Poincare-ball primitives (curvature -1) and entailment-cone geometry.

Every function works on float64 torch tensors whose last axis holds the
coordinates, so a single call handles one point or a whole table of them.
Array-likes are converted with :func:`as_tensor`.  All functions are pure
and differentiable; clamps use one-sided subgradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

BALL_EPS = 1e-5
CONE_K = 0.1
MIN_CONE_NORM = 0.1
ARG_CLAMP_EPS = 1e-7
DENOM_EPS = 1e-15
MIN_NORM = 1e-15

DTYPE = torch.float64


class ContractViolation(ValueError):
    """Raised when an input violates a geometry precondition."""


@dataclass(frozen=True)
class GeometryConfig:
    dim: int = 64
    ball_eps: float = BALL_EPS
    cone_K: float = CONE_K
    min_cone_norm: float = MIN_CONE_NORM
    arg_clamp_eps: float = ARG_CLAMP_EPS

    def __post_init__(self):
        if self.dim < 1:
            raise ContractViolation(f"dim must be positive, got {self.dim}")
        if not 0.0 < self.ball_eps < 1.0:
            raise ContractViolation(f"ball_eps must lie in (0, 1), got {self.ball_eps}")
        if self.cone_K <= 0:
            raise ContractViolation(f"cone_K must be positive, got {self.cone_K}")
        # arcsin argument K(1 - r^2)/r must stay <= 1 at the smallest admissible norm
        r = self.min_cone_norm
        if not 0.0 < r < 1.0 or self.cone_K * (1 - r * r) / r > 1.0 + 1e-12:
            raise ContractViolation(
                f"min_cone_norm={r} gives an undefined aperture for K={self.cone_K}"
            )


DEFAULT = GeometryConfig()


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def _sqnorm(x: torch.Tensor) -> torch.Tensor:
    return (x * x).sum(dim=-1, keepdim=True)


def _norm(x: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(x, dim=-1, keepdim=True)


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise ContractViolation(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def project_to_ball(x, ball_eps: float = BALL_EPS) -> torch.Tensor:
    """Radially rescale points with norm above ``1 - ball_eps`` onto that sphere."""
    x = as_tensor(x)
    if not torch.isfinite(x).all():
        raise ContractViolation("project_to_ball received non-finite coordinates")
    max_norm = 1.0 - ball_eps
    norm = _norm(x)
    scaled = x / norm.clamp_min(MIN_NORM) * max_norm
    return torch.where(norm > max_norm, scaled, x)


def mobius_add(x, y, ball_eps: float = BALL_EPS) -> torch.Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _check_pair(x, y)
    xy = (x * y).sum(dim=-1, keepdim=True)
    x2, y2 = _sqnorm(x), _sqnorm(y)
    num = (1 + 2 * xy + y2) * x + (1 - x2) * y
    den = (1 + 2 * xy + x2 * y2).clamp_min(DENOM_EPS)
    return project_to_ball(num / den, ball_eps)


def expmap0(v, ball_eps: float = BALL_EPS) -> torch.Tensor:
    v = as_tensor(v)
    norm = _norm(v)
    out = torch.tanh(norm) * v / norm.clamp_min(MIN_NORM)
    return project_to_ball(out, ball_eps)


def logmap0(y) -> torch.Tensor:
    y = as_tensor(y)
    norm = _norm(y).clamp_min(MIN_NORM)
    return torch.atanh(norm.clamp_max(1.0 - 1e-15)) * y / norm


def exp_map(z, v, ball_eps: float = BALL_EPS) -> torch.Tensor:
    """Map tangent vector ``v`` at ``z`` onto the ball."""
    z, v = as_tensor(z), as_tensor(v)
    _check_pair(z, v)
    raw = _norm(v)
    norm = raw.clamp_min(MIN_NORM)
    step = torch.tanh(norm / (1 - _sqnorm(z))) * v / norm
    out = mobius_add(z, step, ball_eps)
    # a zero tangent vector must return z bit for bit
    return torch.where(raw == 0, z.expand_as(out), out)


def log_map(z, y) -> torch.Tensor:
    """Tangent vector at ``z`` pointing to ``y``; zero when ``y == z``."""
    z, y = as_tensor(z), as_tensor(y)
    _check_pair(z, y)
    w = mobius_add(-z, y)
    norm = _norm(w).clamp_min(MIN_NORM)
    return (1 - _sqnorm(z)) * torch.atanh(norm.clamp_max(1.0 - 1e-15)) * w / norm


def lift_norm(x, min_norm: float = MIN_CONE_NORM) -> torch.Tensor:
    """Radially push vectors shorter than ``min_norm`` out to that norm.

    The zero vector has no direction and is returned unchanged.
    """
    x = as_tensor(x)
    norm = _norm(x)
    scale = min_norm / norm.clamp_min(MIN_NORM)
    return torch.where((norm < min_norm) & (norm > 0), x * scale, x)


def half_aperture(
    x,
    K: float = CONE_K,
    min_cone_norm: float = MIN_CONE_NORM,
    arg_clamp_eps: float = ARG_CLAMP_EPS,
) -> torch.Tensor:
    """Half opening angle of the entailment cone at ``x``, in radians."""
    x = as_tensor(x)
    norm = _norm(x)
    # lifted vectors can land one ulp short of the bound
    if (norm < min_cone_norm * (1 - 1e-9)).any():
        raise ContractViolation(
            f"half_aperture needs norm >= {min_cone_norm}, got {norm.min().item():.3g}"
        )
    arg = K * (1 - norm * norm) / norm
    return torch.asin(arg.clamp(-1 + arg_clamp_eps, 1 - arg_clamp_eps)).squeeze(-1)


class _SafeAcos(torch.autograd.Function):
    """arccos over a [-1, 1] clamp with a bounded derivative at the endpoints."""

    @staticmethod
    def forward(ctx, a):
        clamped = a.clamp(-1.0, 1.0)
        ctx.save_for_backward(a)
        return torch.acos(clamped)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.saved_tensors
        inside = (a > -1.0) & (a < 1.0)
        denom = torch.sqrt((1 - a * a).clamp_min(ARG_CLAMP_EPS))
        return torch.where(inside, -grad / denom, torch.zeros_like(grad))


def cone_angle_cos(x, y) -> torch.Tensor:
    """Unclamped cosine of the angle at ``x`` between ray O->x and ray x->y."""
    x, y = as_tensor(x), as_tensor(y)
    _check_pair(x, y)
    xy = (x * y).sum(dim=-1, keepdim=True)
    x2, y2 = _sqnorm(x), _sqnorm(y)
    num = xy * (1 + x2) - x2 * (1 + y2)
    den = (
        _norm(x)
        * _norm(x - y)
        * torch.sqrt((1 + x2 * y2 - 2 * xy).clamp_min(0.0))
    )
    return num / den.clamp_min(MIN_NORM)


def cone_angle(x, y) -> torch.Tensor:
    """Angle of ``y`` seen from cone apex ``x``, in radians within [0, pi]."""
    x = as_tensor(x)
    if (_norm(x) == 0).any():
        raise ContractViolation("cone_angle is undefined with the apex at the origin")
    return _SafeAcos.apply(cone_angle_cos(x, y).squeeze(-1))


def dist_to_origin(x) -> torch.Tensor:
    x = as_tensor(x)
    return 2 * torch.atanh(_norm(x).clamp_max(1.0 - 1e-15)).squeeze(-1)


def aperture_root(K: float = CONE_K) -> float:
    """Norm below which the aperture argument exceeds 1: root of K r^2 + r - K."""
    return (-1 + math.sqrt(1 + 4 * K * K)) / (2 * K)
