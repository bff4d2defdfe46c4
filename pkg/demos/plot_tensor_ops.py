"""
Convolution, pooling and gradients on plain arrays
==================================================

Tensors are numpy arrays in channels-last layout.
"""

import numpy as np

from usgrip import tensor as T

# a 3x3 image with one channel and a 2x2 diagonal kernel
x = np.arange(1, 10, dtype=np.float32).reshape(3, 3, 1)
w = np.array([[1, 0], [0, 1]], np.float32).reshape(2, 2, 1, 1)
print(T.conv2d(x, w, np.zeros(1, np.float32), padding="valid")[..., 0])

# "same" padding keeps the spatial size; the extra row/column goes bottom/right
print(T.conv2d(x, w, np.zeros(1, np.float32), padding="same").shape)

# 2x2 max pooling halves each side
print(T.maxpool2d(np.arange(16, dtype=np.float32).reshape(4, 4, 1))[..., 0])

# every forward op returns a cache that its gradient consumes
rng = np.random.default_rng(0)
x = rng.standard_normal((2, 6, 6, 3))
w = rng.standard_normal((3, 3, 3, 4))
out, cache = T.conv2d_forward(x, w, np.zeros(4))
dx, dw, db = T.conv2d_grad(np.ones_like(out), cache)
print(dx.shape, dw.shape, db)

# softmax with the fused cross-entropy gradient
p = T.softmax(np.zeros((1, 4)))
print(p, T.softmax_crossentropy_grad(p, [0]))
