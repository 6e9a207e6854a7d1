"""Build a small expression on the tape, backpropagate, and check it numerically.

The tape engine is what every other part of the package trains through, so
this is the place to start.  Run:  python3 demos/01_autodiff.py
"""

import numpy as np

from aqfusion import tensor as T
from aqfusion.tensor import Tensor

g = np.random.default_rng(0)

with T.precision("high"):
    x = Tensor(g.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(g.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(g.normal(size=3), requires_grad=True)

    def loss():
        y = T.relu(T.channel_bias(T.conv2d(x, w, stride=1, pad=1), b))
        return T.mean(T.square(y))

    out = loss()
    out.backward()
    print(f"loss = {out.item():.6f}")
    print(f"dL/db analytic = {np.round(b.grad, 6)}")

    for t in (x, w, b):
        t.grad = None
    err = T.gradcheck(loss, [x, w, b])
    print(f"worst relative error against central differences: {err:.2e}")
