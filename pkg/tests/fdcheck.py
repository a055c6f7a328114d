"""Central finite differences, used as an autograd-independent gradient oracle."""

import numpy as np
import torch


def central_diff(fn, params, h=1e-6):
    """Gradient of the scalar ``fn()`` w.r.t. each tensor in ``params`` by central differences.

    ``params`` are perturbed in place under no_grad and restored afterwards.
    """
    out = []
    with torch.no_grad():
        for p in params:
            g = np.zeros(p.numel())
            flat = p.view(-1)
            for i in range(p.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            out.append(g.reshape(tuple(p.shape)))
    return out


def rel_error(a, b, floor=1e-8):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
