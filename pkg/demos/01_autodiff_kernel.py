#!/usr/bin/env python3
# The tensor kernel: a handful of ops, reverse-mode gradients, and a
# finite-difference oracle that keeps the backward code honest.

import numpy as np

from emofuse import tensor as T

# A tensor is data plus an optional gradient slot. Ops record how to push
# gradients back; backward() walks the graph from a scalar root.
a = T.tensor([[1.0, 2.0]], requires_grad=True)
b = T.tensor([[3.0], [4.0]], requires_grad=True)
c = T.matmul(a, b)               # [[1*3 + 2*4]] = [[11]]
print("matmul:", c.data)

T.backward(c)
print("dA:", a.grad)             # rows of b transposed
print("dB:", b.grad)             # columns of a transposed

# Row softmax is stabilized by max subtraction, so huge logits are fine.
s = T.softmax_rows(T.tensor([[1000.0, 1000.0, 999.0]]))
print("softmax of [1000, 1000, 999]:", s.data, "row sum:", s.data.sum())

# The causal convolution left-pads with zeros: frame t sees frames <= t only.
x = T.tensor([[1.0], [2.0], [3.0], [4.0]])
w = T.tensor(np.ones((3, 1, 1)))                 # kernel 3, one channel
y = T.conv1d_causal(x, w, T.tensor(np.zeros(1)), dilation=1)
print("causal conv of [1,2,3,4] with [1,1,1]:", y.data.ravel())  # 1, 3, 6, 9

# Dropout masks come from a counter-keyed generator owned by the run, so the
# same seed replays the same masks bit for bit.
rng = T.DropoutRng(7)
m1 = T.dropout(T.tensor(np.ones((2, 8))), 0.5, train=True, rng=rng)
rng2 = T.DropoutRng(7)
m2 = T.dropout(T.tensor(np.ones((2, 8))), 0.5, train=True, rng=rng2)
print("dropout replay identical:", (m1.data == m2.data).all())

# grad_check compares every analytic gradient against central differences
# (f(x+h) - f(x-h)) / 2h in float64. This is the oracle every layer and the
# full training objective must pass.
theta = T.tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
err = T.grad_check(lambda: T.tensor_inner(theta, theta), [theta])
print(f"grad_check on theta^T theta: analytic {theta.grad}, max rel err {err:.2e}")
