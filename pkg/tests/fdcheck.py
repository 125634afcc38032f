"""Central finite-difference gradient oracle used across the test suite.

The oracle is deliberately independent of the tape: it re-runs the forward
function with perturbed copies of the raw numpy buffers and never touches
recorded gradients.
"""

import numpy as np

from cspdet.tensor import Tensor

STEP = 1e-5
TOL = 1e-4


def numeric_grad(fn, tensors, index, step=STEP):
    """d fn / d tensors[index] by central differences, elementwise."""
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(*tensors).data)
        flat[i] = orig - step
        lo = float(fn(*tensors).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def assert_grads_match(fn, tensors, tol=TOL, step=STEP):
    """Check every requires_grad input of scalar-valued ``fn`` against the
    finite-difference oracle with relative tolerance ``tol``."""
    for t in tensors:
        t.zero_grad()
    out = fn(*tensors)
    assert out.data.size == 1, "assert_grads_match expects a scalar output"
    out.backward()
    for k, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        num = numeric_grad(fn, tensors, k, step=step)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(1.0, np.maximum(np.abs(num), np.abs(ana)))
        err = np.abs(ana - num) / denom
        assert err.max() < tol, (
            f"gradient mismatch on input {k} ({t.op}): max rel err {err.max():.3g}"
        )


def rand_tensor(rng, shape, requires_grad=True, lo=-1.0, hi=1.0, margin=1e-3):
    """Random tensor whose entries stay ``margin`` away from zero so that
    kinked ops (relu/leaky/max ties) are differentiable at the sample."""
    data = rng.uniform(lo, hi, size=shape)
    data = np.where(np.abs(data) < margin, margin * np.sign(data) + (data == 0) * margin, data)
    return Tensor(data, requires_grad=requires_grad)
