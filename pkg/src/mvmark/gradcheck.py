"""Finite-difference gradient verification for probe models.

Losses are arbitrary callables taking a module; probes should be built in
float64 (build_module(..., dtype=torch.float64)) so central differences with
step 1e-5 resolve to ~1e-10.
"""

from __future__ import annotations

import numpy as np
import torch

from .models import flat_parameters, set_flat_parameters


def analytic_grad(module, loss_fn) -> np.ndarray:
    """Flat autograd gradient of loss_fn(module) w.r.t. all parameters."""
    module.zero_grad()
    loss = loss_fn(module)
    loss.backward()
    grads = [p.grad if p.grad is not None else torch.zeros_like(p)
             for p in module.parameters()]
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy().astype(np.float64)


def finite_diff_grad(module, loss_fn, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient over the flat parameter vector."""
    theta = flat_parameters(module).astype(np.float64)
    grad = np.empty_like(theta)
    for i in range(len(theta)):
        for sign in (+1.0, -1.0):
            bumped = theta.copy()
            bumped[i] += sign * eps
            set_flat_parameters(module, bumped)
            with torch.no_grad():
                val = float(loss_fn(module))
            if sign > 0:
                plus = val
            else:
                minus = val
        grad[i] = (plus - minus) / (2.0 * eps)
    set_flat_parameters(module, theta)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(|a|, |n|, 1e-8), maximized."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(module, loss_fn, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences."""
    return max_relative_error(analytic_grad(module, loss_fn),
                              finite_diff_grad(module, loss_fn, eps=eps))
