"""Shared numeric helpers for the test suite."""

import torch


def unit(v):
    return v / torch.linalg.vector_norm(v)


def randomize_(module, seed=0, std=0.2):
    """Give every parameter (gates included) a nonzero random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return module


def central_difference(loss_fn, params, eps=1e-5):
    """Numerical gradient of a scalar closure w.r.t. each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-5):
    """Worst per-tensor ``||a - n|| / max(||a||, ||n||, floor)``.

    Normwise rather than elementwise: central differences at eps 1e-5 carry
    ~1e-10 absolute roundoff, which swamps entries whose true gradient is tiny.
    The floor covers tensors whose exact gradient is zero (a key bias under
    softmax, for one).
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(n)), floor)
        worst = max(worst, float(torch.linalg.vector_norm(a - n)) / scale)
    return worst


def gradient_check(loss_fn, params, eps=1e-5):
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    numeric = central_difference(loss_fn, params, eps)
    return max_relative_error(analytic, numeric)


ACCEPTANCE = []


def report(number, title, passed, detail=""):
    """Print and keep one acceptance line; the terminal summary repeats them."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return line
