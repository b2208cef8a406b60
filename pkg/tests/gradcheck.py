"""Shared helper for checking tape gradients against finite differences."""

import numpy as np

from anunet import autodiff as ad
from oracles import fd_gradient, max_rel_err


def tape_gradients(build, arrays):
    """Run ``build`` (list of tensors -> scalar Tensor) under a tape and
    return the loss value plus the gradient of every input array."""
    tensors = [ad.Parameter(a, name=f"arg{i}") for i, a in enumerate(arrays)]
    with ad.Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)
    return float(loss.data), [t.grad.copy() for t in tensors]


def assert_gradients_match(build, arrays, tol=1e-4, h=1e-5, floor=1e-6):
    _, grads = tape_gradients(build, arrays)

    def value(arrs):
        return float(build([ad.Tensor(a) for a in arrs]).data)

    fd = fd_gradient(value, [np.array(a) for a in arrays], h=h)
    worst = max(max_rel_err(g, f, floor) for g, f in zip(grads, fd))
    assert worst < tol, f"tape/finite-difference mismatch: {worst:.3e}"
    return worst
