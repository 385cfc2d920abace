"""Shared helpers: central-difference gradient checking in float64."""

import numpy as np

from mdvc.tensor import Tape


def analytic_grads(make_loss, leaves):
    """Differentiate make_loss() once and return each leaf's gradient."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    return [leaf.grad for leaf in leaves]


def gradcheck(make_loss, leaves, h=1e-5, tol=1e-4, sample=None, seed=0):
    """Compare tape gradients against central finite differences.

    make_loss must rebuild the scalar loss from the same leaf objects on
    every call. For large leaves, sample limits how many coordinates are
    perturbed. Returns the worst relative error seen; asserts it < tol.
    """
    grads = analytic_grads(make_loss, leaves)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        assert grad is not None, f"no gradient reached leaf {leaf!r}"
        assert grad.shape == leaf.data.shape
        flat = leaf.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        if sample is not None and flat.size > sample:
            coords = rng.choice(flat.size, size=sample, replace=False)
        else:
            coords = np.arange(flat.size)
        for i in coords:
            kept = flat[i]
            flat[i] = kept + h
            up = make_loss().item()
            flat[i] = kept - h
            down = make_loss().item()
            flat[i] = kept
            numeric = (up - down) / (2.0 * h)
            err = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]), abs(numeric))
            worst = max(worst, err)
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e} >= {tol}"
    return worst
