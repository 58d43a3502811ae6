"""
The tensor engine and its auditors
==================================

Everything learnable runs on a small reverse-mode tape: a fixed catalog of
primitives, each with an explicit backward rule, each policed by a central
finite-difference check.  This demo differentiates a tiny expression by
hand-verifiable math, then runs the full primitive audit.
"""

import numpy as np

from panodepth import tensor as T
from panodepth.audit import audit_tensor
from panodepth.tensor import Tensor, backward, finite_diff_gradcheck

# d/dx sum(x * x + 3x) = 2x + 3
x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
loss = T.tensor_sum(T.mul(x, x) + x * 3.0)
backward(loss)
print("grad:", x.grad, " expected:", 2 * x.numpy() + 3)

# A layer with a nonlinearity: sigma(Wx) summed, checked against central
# differences in float64.
rng = np.random.default_rng(0)
w0 = rng.standard_normal((4, 4))
xin = Tensor(rng.standard_normal((4, 4)), dtype=np.float64)


def layer(w):
    return T.tensor_sum(T.sigmoid(T.matmul(w, xin)))


report = finite_diff_gradcheck(layer, Tensor(w0, dtype=np.float64))
print(report)

# A wrong rule cannot hide: wire the gradient of x^3 into a square op.
def bad_square(t):
    out = t.data * t.data
    return T._record("bad_square", (t,), out, lambda g: (g * 3 * t.data ** 2,))


bad = finite_diff_gradcheck(lambda t: T.tensor_sum(bad_square(t)),
                            Tensor(np.full((2, 2), 1.5), dtype=np.float64))
print("deliberately wrong rule:", bad)

# The complete audit: every primitive, five seeds, plus the loop oracles
# for matmul and conv2d.  The CLI exposes this as `panodepth audit`.
results = audit_tensor()
for r in results:
    print(r.line())
print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
