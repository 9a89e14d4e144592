"""Brute-force references that share no code with the package under test."""
from __future__ import annotations

import numpy as np

from gradcheck import fd_grad


def mlp_nll(flat: np.ndarray, shapes, x: np.ndarray, label: int) -> float:
    """-log p(label | x) for a one-hidden-layer ReLU MLP, all float64 numpy."""
    parts, i = [], 0
    for s in shapes:
        k = int(np.prod(s))
        parts.append(flat[i:i + k].reshape(s))
        i += k
    w0, b0, w1, b1 = parts
    h = np.maximum(x.reshape(-1) @ w0 + b0, 0.0)
    z = h @ w1 + b1
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def fisher_oracle(model, images: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Mean over samples of squared finite-difference gradients of the per-sample NLL."""
    names = list(model.params)
    shapes = [model.params[n].shape for n in names]
    flat = np.concatenate([model.params[n].data.astype(np.float64).reshape(-1) for n in names])
    acc = np.zeros_like(flat)
    for x, y in zip(images.astype(np.float64), labels):
        g = fd_grad(lambda p: mlp_nll(p, shapes, x, int(y)), flat, h=1e-6)
        acc += g * g
    acc /= len(labels)
    out, i = {}, 0
    for n, s in zip(names, shapes):
        k = int(np.prod(s))
        out[n] = acc[i:i + k].reshape(s)
        i += k
    return out


def fisher_rel_err(estimated, oracle: dict[str, np.ndarray]) -> float:
    """Worst elementwise relative error, with a floor at 1e-3 of each tensor's max."""
    worst = 0.0
    for name, ref in oracle.items():
        got = estimated[name].astype(np.float64)
        floor = max(np.abs(ref).max() * 1e-3, 1e-12)
        worst = max(worst, float((np.abs(got - ref) / np.maximum(np.abs(ref), floor)).max()))
    return worst
