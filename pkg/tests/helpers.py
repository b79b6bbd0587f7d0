"""Shared test utilities: gradient checking against central differences."""

from __future__ import annotations

import numpy as np

from peftlab import tensor as T


def random_inputs(shapes, seed, lo=-1.5, hi=1.5, avoid_kinks=False):
    """Seeded float32 inputs; optionally pushed away from |x| < 0.1 so that
    piecewise ops (relu) see no kink within the finite-difference step."""
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        x = rng.uniform(lo, hi, size=shape).astype(np.float32)
        if avoid_kinks:
            x = np.where(np.abs(x) < 0.1, x + np.sign(x + 0.05) * 0.25, x)
        out.append(x.astype(np.float32))
    return out


def check_grads(build, arrays, seed, rtol=1e-3, step=1e-3):
    """Compare backward against finite_diff_grad for every input.

    ``build`` maps a tuple of Tensors to an output Tensor; the scalar
    objective is sum(output * R) for a fixed random projection R, which makes
    every output coordinate matter.
    """
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*leaves)
    rng = np.random.default_rng(seed + 1_000_003)
    proj = T.Tensor(rng.uniform(-1, 1, size=out.shape).astype(np.float32))
    loss = T.sum_all(T.hadamard(out, proj))
    T.backward(loss)

    for i, leaf in enumerate(leaves):
        def objective(t, i=i):
            subs = [T.Tensor(a) for a in arrays]
            subs[i] = t
            return T.sum_all(T.hadamard(build(*subs), proj)).item()

        fd = T.finite_diff_grad(objective, T.Tensor(arrays[i]), step=step)
        assert leaf.grad is not None, f"input {i} got no grad"
        assert T.grad_close(leaf.grad, fd.data, rtol=rtol), (
            f"input {i}: backward disagrees with finite differences\n"
            f"backward={leaf.grad}\nfinite_diff={fd.data}")
