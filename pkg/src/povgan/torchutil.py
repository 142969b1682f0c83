"""Small torch helpers: seeded init, freezing, image layout conversion."""

from contextlib import contextmanager

import numpy as np
import torch


def init_module(module: torch.nn.Module, seed: int, final_zero: str = None):
    """Re-initialize all parameters from one seeded generator.

    Weights get N(0, 1/fan_in) entries, biases zero. Iteration is over
    sorted parameter names, so the result does not depend on construction
    order or on the global RNG. `final_zero` names a submodule whose
    parameters are zeroed (residual heads start as the identity).
    """
    gen = torch.Generator()
    gen.manual_seed(seed)
    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if final_zero is not None and name.startswith(final_zero):
                param.zero_()
            elif param.ndim > 1:
                fan_in = param[0].numel()
                param.copy_(torch.randn(param.shape, generator=gen) / fan_in ** 0.5)
            else:
                param.zero_()
    return module


@contextmanager
def frozen(*modules):
    """Temporarily block gradient accumulation into the modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    prior = [p.requires_grad for p in params]
    try:
        for p in params:
            p.requires_grad_(False)
        yield
    finally:
        for p, r in zip(params, prior):
            p.requires_grad_(r)


def to_nchw(images) -> torch.Tensor:
    """[H,W,3] or [B,H,W,3] arrays/tensors -> float32 [B,3,H,W]."""
    t = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).contiguous()


def leaky_relu(x):
    return torch.nn.functional.leaky_relu(x, 0.2)
