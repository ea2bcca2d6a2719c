"""Central finite-difference gradient harness (float64)."""

import numpy as np
import torch


def fd_check(fn, params, rng, n_coords=24, n_dirs=3, eps=1e-6):
    """Max relative error between autograd and central differences.

    ``fn()`` returns a scalar tensor. Checks ``n_coords`` random coordinates of
    every tensor in ``params`` and ``n_dirs`` random directional derivatives
    over all of them jointly.
    """
    for p in params:
        p.grad = None
    fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for i in rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
                analytic.append(g.view(-1)[i].item())
                numeric.append((up - down) / (2 * eps))
        for _ in range(n_dirs):
            dirs = [torch.from_numpy(rng.normal(size=p.shape)) for p in params]
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            up = fn().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            down = fn().item()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            analytic.append(sum((g * d).sum().item() for g, d in zip(grads, dirs)))
            numeric.append((up - down) / (2 * eps))
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)
