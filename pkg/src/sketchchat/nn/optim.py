"""Adam with global-norm gradient clipping, and exponential schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from sketchchat.errors import ConfigError


@dataclass(frozen=True)
class ExpSchedule:
    """Exponential approach from `initial` toward `bound`:
    decay gives bound + (initial - bound) * rate^step,
    grow gives bound - (bound - initial) * rate^step."""

    initial: float
    bound: float
    rate: float
    direction: str

    def __post_init__(self):
        if self.direction not in ("decay", "grow"):
            raise ConfigError(f"direction must be decay or grow, got {self.direction!r}")
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"rate must be in (0, 1], got {self.rate}")
        if self.direction == "decay" and self.initial < self.bound:
            raise ConfigError("decay needs initial >= bound")
        if self.direction == "grow" and self.initial > self.bound:
            raise ConfigError("grow needs initial <= bound")

    def value(self, step: int) -> float:
        if step < 0:
            raise ConfigError("step must be >= 0")
        # same closed form for both directions; exact at step 0
        return self.initial + (self.bound - self.initial) * (1.0 - self.rate**step)


def clip_global_norm(tensors: list[torch.Tensor], max_norm: float) -> float:
    """Scale the tensors in place so their joint 2-norm is at most max_norm.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float((t.double() ** 2).sum()) for t in tensors))
    if total > max_norm > 0:
        scale = max_norm / total
        with torch.no_grad():
            for t in tensors:
                t.mul_(scale)
    return total


class ClippedAdam:
    """Adam whose gradients are jointly norm-clipped before the moment
    update. Learning rate is an attribute so schedules can set it per step."""

    def __init__(
        self,
        params,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float = 1.0,
    ):
        self.params = [p for p in params]
        if not self.params:
            raise ConfigError("optimizer needs at least one parameter")
        if lr <= 0 or eps <= 0 or clip_norm <= 0:
            raise ConfigError("lr, eps and clip_norm must be positive")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ConfigError("betas must lie in [0, 1)")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.exp_avg = [torch.zeros_like(p) for p in self.params]
        self.exp_avg_sq = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> float:
        """Applies one update; returns the gradient norm before clipping."""
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        norm = clip_global_norm(grads, self.clip_norm)
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.exp_avg, self.exp_avg_sq):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bias2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bias1, denom, value=-self.lr)
        return norm

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {"step": torch.tensor([float(self.step_count)])}
        for i, (m, v) in enumerate(zip(self.exp_avg, self.exp_avg_sq)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        self.step_count = int(arrays["step"].item())
        for i in range(len(self.params)):
            self.exp_avg[i] = arrays[f"m.{i}"].to(self.params[i].dtype).clone()
            self.exp_avg_sq[i] = arrays[f"v.{i}"].to(self.params[i].dtype).clone()
