"""Shared fixtures and the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np
import pytest

from vitslim.tensor import Tensor, set_default_dtype


@pytest.fixture
def f64():
    """Run the tensor core in float64 for high-precision gradient checks."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float32)


def gradcheck(fn, arrays, eps: float = 1e-3, tol: float = 1e-4,
              probes: int = 40, seed: int = 99) -> float:
    """Central finite differences against tape gradients.

    ``fn`` maps Tensors to one output Tensor; the scalar loss is a fixed
    random projection of the output. Error metric per element:
    |fd - analytic| / max(1, |fd|, |analytic|). Returns the worst error and
    asserts it is below ``tol``. Intended to run under the ``f64`` fixture.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def loss():
        return float((fn(*tensors) * Tensor(proj)).sum().data)

    (out * Tensor(proj)).sum().backward()
    pick = np.random.default_rng(seed + 1)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "no gradient reached an input"
        flat = t.data.reshape(-1)
        an = t.grad.reshape(-1)
        idx = pick.choice(flat.size, size=min(probes, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss()
            flat[i] = orig - eps
            lm = loss()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - an[i]) / max(1.0, abs(fd), abs(an[i])))
    assert worst < tol, f"finite-difference mismatch: worst relative error {worst:.3g}"
    return worst
