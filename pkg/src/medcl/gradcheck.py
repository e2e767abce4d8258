"""Central finite differences, independent of autograd."""
import numpy as np
import torch


def numeric_grad(f, x: torch.Tensor, h: float = 1e-6, indices=None) -> np.ndarray:
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def autograd_grad(f, x: torch.Tensor) -> np.ndarray:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g.reshape(-1).numpy()


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
