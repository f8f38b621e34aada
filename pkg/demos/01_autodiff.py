"""Reverse-mode autodiff on numpy arrays, checked against finite differences."""

import numpy as np

from casplab import tensor as T
from casplab.gradcheck import check_gradients
from casplab.rng import Rng
from casplab.tensor import Tensor

rng = Rng(0)
x = Tensor(rng.normal((4, 6)), requires_grad=True)
w = Tensor(rng.normal((6, 3)), requires_grad=True)
y = np.array([0, 2, 1, 2])

loss = T.cross_entropy(T.gelu(x @ w), y)
loss.backward()
print("loss", float(loss.data))
print("dL/dw row 0", w.grad[0])

# the same graph in float64, compared with central differences
with T.precision(np.float64):
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    w64 = Tensor(w.data.astype(np.float64), requires_grad=True)
    results = check_gradients(lambda: T.cross_entropy(T.gelu(x64 @ w64), y), [("x", x64), ("w", w64)], h=1e-5)
for r in results:
    print(f"{r.name}: max relative error {r.max_rel_error:.2e} ({'ok' if r.passed else 'FAIL'})")
