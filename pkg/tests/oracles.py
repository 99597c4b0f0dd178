"""Independent reference implementations used by the tests."""

import numpy as np
import torch


def finite_difference(fn, tensor: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (modified in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + step
            hi = float(fn())
            flat[i] = old - step
            lo = float(fn())
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def bi_wkv_oracle(k, v, w, u):
    """Quadratic direct sum in float64."""
    k, v, w, u = (np.asarray(a, dtype=np.float64) for a in (k, v, w, u))
    M, C = k.shape
    out = np.zeros((M, C))
    for t in range(M):
        num = np.zeros(C)
        den = np.zeros(C)
        for i in range(M):
            e = u + k[t] if i == t else -(abs(t - i) - 1) / M * w + k[i]
            num += np.exp(e) * v[i]
            den += np.exp(e)
        out[t] = num / den
    return out


def fusion_oracle(r, k, v, u, literal=True):
    r, k, v, u = (np.asarray(a, dtype=np.float64) for a in (r, k, v, u))
    M, C = r.shape
    key, val = (r, k) if literal else (k, v)
    out = np.zeros((M, C))
    for t in range(M):
        num = np.zeros(C)
        den = np.zeros(C)
        for i in range(M):
            e = u + key[t] if i == t else -(abs(t - i) - 1) / M * v[i] + key[i]
            num += np.exp(e) * val[i]
            den += np.exp(e)
        out[t] = num / den
    return out
