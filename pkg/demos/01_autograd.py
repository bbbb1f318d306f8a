"""Build a small expression, differentiate it, and verify the gradient
against central finite differences."""

import numpy as np

from lgmsnet import Tensor, backward, gradcheck, nn
from lgmsnet.tensor import matmul, mul, tsum

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)


def f(x, w):
    # sum(silu(x @ w) * x @ w)
    h = matmul(x, w)
    return tsum(mul(nn.silu(h), h))


grads = backward(f(x, w), wrt=[x, w])
print("df/dw =\n", grads[w].data)

report = gradcheck(f, [x, w], names=["x", "w"])
print("max relative error per input:", report.max_rel_err, "passed:", report.passed)
