"""Central finite-difference gradient verification.

The comparison path is independent of autograd: it re-runs the forward pass
at perturbed inputs in double precision and differences the results.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import torch


def central_difference(
    f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], step: float = 1e-4
) -> list[torch.Tensor]:
    """Finite-difference gradient of the scalar f(*inputs) for every element
    of every input tensor."""
    work = [t.detach().clone() for t in inputs]
    grads = []
    with torch.no_grad():
        for t in work:
            flat = t.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(f(*work))
                flat[i] = orig - step
                lo = float(f(*work))
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads.append(g.reshape(t.shape))
    return grads


def check_gradients(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-4,
    tol: float = 1e-3,
) -> float:
    """Compares autograd against central differences in double precision.
    Error is |a - fd| / max(1, |a|, |fd|) elementwise; returns the maximum
    and raises AssertionError when it reaches tol."""
    doubles = [t.detach().to(torch.float64).requires_grad_(True) for t in inputs]
    out = f(*doubles)
    if out.numel() != 1:
        raise ValueError("f must reduce to a scalar")
    auto = torch.autograd.grad(out, doubles)
    fd = central_difference(f, doubles, step=step)
    worst = 0.0
    for a, b in zip(auto, fd):
        denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=1.0)
        worst = max(worst, float(((a - b).abs() / denom).max()))
    if worst >= tol:
        raise AssertionError(f"gradient mismatch: max relative error {worst:.3e} >= {tol:.0e}")
    return worst


def check_module_gradients(
    module: torch.nn.Module,
    inputs: Sequence[torch.Tensor],
    reduce_output: Callable[..., torch.Tensor] | None = None,
    step: float = 1e-4,
    tol: float = 1e-3,
) -> float:
    """Runs check_gradients over a module's inputs and all its parameters,
    feeding parameter candidates through a stateless functional call."""
    module = module.double()
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach().clone() for _, p in module.named_parameters()]
    n_in = len(inputs)

    def f(*tensors: torch.Tensor) -> torch.Tensor:
        ins = tensors[:n_in]
        overrides = dict(zip(names, tensors[n_in:]))
        out = torch.func.functional_call(module, overrides, tuple(ins))
        if reduce_output is not None:
            return reduce_output(out)
        return out.sum()

    return check_gradients(f, [*inputs, *params], step=step, tol=tol)
