"""Bivariate Gaussian mixture head: parameter transforms, exact log
likelihood and temperature-controlled sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

from sketchchat.errors import DimensionError, ParameterError

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GMMParams:
    """Mixture over 2-d offsets. Leading dimensions are free; the trailing
    layout is weights (..., m), means (..., m, 2), stds (..., m, 2),
    rhos (..., m)."""

    weights: torch.Tensor
    means: torch.Tensor
    stds: torch.Tensor
    rhos: torch.Tensor

    def __post_init__(self):
        m = self.weights.shape[-1]
        if self.means.shape[-2:] != (m, 2) or self.stds.shape[-2:] != (m, 2):
            raise DimensionError("means/stds must be (..., m, 2)")
        if self.rhos.shape != self.weights.shape:
            raise DimensionError("rhos must match weights shape")
        if self.means.shape[:-2] != self.weights.shape[:-1]:
            raise DimensionError("batch dims must agree")

    @property
    def mixtures(self) -> int:
        return self.weights.shape[-1]

    def validate(self) -> None:
        w = self.weights
        if bool((w < 0).any()):
            raise ParameterError("negative mixture weight")
        if not bool(torch.allclose(w.sum(dim=-1), torch.ones_like(w.sum(dim=-1)), atol=1e-5)):
            raise ParameterError("mixture weights must sum to 1")
        if bool((self.stds <= 0).any()):
            raise ParameterError("stds must be positive")
        if bool((self.rhos.abs() >= 1).any()):
            raise ParameterError("correlation must lie in (-1, 1)")

    def mean(self) -> torch.Tensor:
        """Mixture mean: weight-weighted component means, shape (..., 2)."""
        return (self.weights.unsqueeze(-1) * self.means).sum(dim=-2)


def gmm_params_from_raw(raw: torch.Tensor) -> GMMParams:
    """Map unconstrained head output (..., 6m) onto the simplex/positive/
    bounded parameter space: softmax weights, exp stds, tanh correlation."""
    if raw.shape[-1] % 6 != 0:
        raise DimensionError(f"raw width must be 6*m, got {raw.shape[-1]}")
    m = raw.shape[-1] // 6
    chunks = raw.view(*raw.shape[:-1], m, 6)
    weights = F.softmax(chunks[..., 0], dim=-1)
    means = chunks[..., 1:3]
    stds = torch.exp(chunks[..., 3:5])
    rhos = torch.tanh(chunks[..., 5])
    return GMMParams(weights=weights, means=means, stds=stds, rhos=rhos)


def gmm_log_likelihood(params: GMMParams, point: torch.Tensor) -> torch.Tensor:
    """Log density of `point` (..., 2) under the mixture, shape (...)."""
    if point.shape[-1] != 2:
        raise DimensionError(f"point must end in 2, got {tuple(point.shape)}")
    dx = (point[..., None, 0] - params.means[..., 0]) / params.stds[..., 0]
    dy = (point[..., None, 1] - params.means[..., 1]) / params.stds[..., 1]
    rho = params.rhos
    one_minus_r2 = 1.0 - rho * rho
    z = dx * dx + dy * dy - 2.0 * rho * dx * dy
    log_norm = (
        LOG_TWO_PI
        + torch.log(params.stds[..., 0])
        + torch.log(params.stds[..., 1])
        + 0.5 * torch.log(one_minus_r2)
    )
    comp_ll = -z / (2.0 * one_minus_r2) - log_norm
    return torch.logsumexp(torch.log(params.weights) + comp_ll, dim=-1)


def sample_categorical(
    logits: torch.Tensor, temperature: float, generator: torch.Generator | None = None
) -> int:
    """Draw an index from softmax(logits / t); t = 0 picks the argmax."""
    if logits.dim() != 1:
        raise DimensionError("logits must be 1-d")
    if temperature < 0:
        raise ParameterError("temperature must be >= 0")
    if temperature == 0:
        return int(torch.argmax(logits).item())
    probs = F.softmax(logits / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator).item())


def gmm_sample_many(
    params: GMMParams, temperature: float, n: int, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw n 2-d offsets, shape (n, 2). Temperature sharpens the component
    choice (log-weight scaling) and scales stds by sqrt(t); zero temperature
    returns the most probable component's mean."""
    if params.weights.dim() != 1:
        raise DimensionError("sampling expects unbatched params")
    if temperature < 0:
        raise ParameterError("temperature must be >= 0")
    params.validate()
    if temperature == 0:
        k = int(torch.argmax(params.weights).item())
        return params.means[k].expand(n, 2).clone()
    probs = F.softmax(torch.log(params.weights) / temperature, dim=-1)
    ks = torch.multinomial(probs, n, replacement=True, generator=generator)
    mu = params.means[ks]
    std = params.stds[ks] * math.sqrt(temperature)
    rho = params.rhos[ks]
    eps = torch.randn(n, 2, generator=generator, dtype=params.means.dtype)
    x = mu[:, 0] + std[:, 0] * eps[:, 0]
    y = mu[:, 1] + std[:, 1] * (rho * eps[:, 0] + torch.sqrt(1.0 - rho * rho) * eps[:, 1])
    return torch.stack([x, y], dim=1)


def gmm_sample(
    params: GMMParams, temperature: float, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Draw one 2-d offset; see gmm_sample_many."""
    return gmm_sample_many(params, temperature, 1, generator)[0]
