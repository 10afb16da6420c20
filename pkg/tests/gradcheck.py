"""Central finite-difference gradient oracle, independent of the autograd path."""

import numpy as np

from streamvqa.autograd import Tensor


def finite_difference(fn, tensors: list[Tensor], h: float = 1e-5,
                      max_coords: int | None = None,
                      rng: np.random.Generator | None = None):
    """Numerical gradient of scalar fn() with respect to each tensor.

    Perturbs every coordinate (or a random subset of `max_coords`) by +-h and
    applies the central difference. Returns per-tensor arrays matching the
    tensor shapes, with unprobed coordinates set to NaN.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        count = flat.size
        if max_coords is not None and count > max_coords:
            idx = rng.choice(count, size=max_coords, replace=False)
        else:
            idx = np.arange(count)
        g = np.full(count, np.nan)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def assert_close_to_fd(fn, tensors: list[Tensor], rtol: float = 1e-4,
                       h: float = 1e-5, max_coords: int | None = None,
                       seed: int = 0) -> None:
    """Backward() gradients must match central finite differences.

    Relative error uses a unit floor so near-zero gradients compare absolutely.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    fd = finite_difference(fn, tensors, h=h, max_coords=max_coords, rng=rng)
    for t, g_fd in zip(tensors, fd):
        assert t.grad is not None, "leaf did not receive a gradient"
        probed = ~np.isnan(g_fd)
        got = t.grad[probed]
        want = g_fd[probed]
        denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1.0)
        err = np.abs(got - want) / denom
        assert err.max() <= rtol, f"gradient mismatch: max rel err {err.max():.3e}"
