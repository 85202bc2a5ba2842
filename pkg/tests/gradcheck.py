"""Central finite differences against the tape's analytic gradients."""

import numpy as np

from lrt import numerics as nx


def numeric_grad(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = float(f().data)
            flat[k] = old - h
            down = float(f().data)
            flat[k] = old
            gflat[k] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grad(f, params):
    for p in params:
        p.grad = None
        p.requires_grad = True
    with nx.Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def rel_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def check(f, params, h=1e-5):
    """Relative error between analytic and central-difference gradients of scalar ``f()``."""
    return rel_error(analytic_grad(f, params), numeric_grad(f, params, h))
