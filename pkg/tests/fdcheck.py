"""Central-finite-difference gradient checking against autograd.

Networks are converted to float64 before checking; entries of large tensors
are subsampled deterministically.
"""

import numpy as np
import torch


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param_grads(loss_fn, module, eps=1e-5, tol=1e-3, max_entries=24,
                      seed=0):
    """Compare d(loss)/d(theta) with central differences for every trainable
    tensor of `module`. `loss_fn()` must recompute the loss from the current
    parameter values. Returns the worst relative error seen."""
    params = [(n, p) for n, p in sorted(module.named_parameters())
              if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params],
                                allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (name, param), grad in zip(params, grads):
        grad = torch.zeros_like(param) if grad is None else grad
        flat = param.detach().reshape(-1)
        n = flat.numel()
        idx = range(n) if n <= max_entries else sorted(
            rng.choice(n, size=max_entries, replace=False))
        for i in idx:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + eps
            plus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = original - eps
            minus = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] = original
            fd = (plus - minus) / (2 * eps)
            analytic = float(grad.reshape(-1)[i])
            err = rel_err(analytic, fd, floor=1e-6)
            worst = max(worst, err)
            assert err <= tol, (
                f"{name}[{i}]: analytic {analytic:.8g} vs fd {fd:.8g} "
                f"(rel err {err:.3g} > {tol})")
    return worst


def check_input_grad(loss_fn, tensor, eps=1e-5, tol=1e-3, max_entries=32,
                     seed=0):
    """Same check for d(loss)/d(input tensor); loss_fn(x) takes the input."""
    x = tensor.detach().clone().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat = x.detach().reshape(-1)
    rng = np.random.default_rng(seed)
    n = flat.numel()
    idx = range(n) if n <= max_entries else sorted(
        rng.choice(n, size=max_entries, replace=False))
    worst = 0.0
    for i in idx:
        original = flat[i].item()
        with torch.no_grad():
            flat[i] = original + eps
        plus = float(loss_fn(x).detach())
        with torch.no_grad():
            flat[i] = original - eps
        minus = float(loss_fn(x).detach())
        with torch.no_grad():
            flat[i] = original
        fd = (plus - minus) / (2 * eps)
        err = rel_err(float(grad.reshape(-1)[i]), fd, floor=1e-6)
        worst = max(worst, err)
        assert err <= tol, (
            f"input[{i}]: analytic {float(grad.reshape(-1)[i]):.8g} vs fd "
            f"{fd:.8g} (rel err {err:.3g} > {tol})")
    return worst
