"""Show where a deformable kernel reads from.

With zero offsets and a unit mask the layer reproduces an ordinary
convolution. Shifting every tap by one row moves the receptive field,
which the output reflects exactly.
"""

import numpy as np

from tsain.deformconv import deform_conv2d, sampling_positions
from tsain.numerics import ConvParams, Tensor4, conv2d

rng = np.random.default_rng(0)
x = Tensor4(rng.normal(size=(1, 2, 6, 6)))
p = ConvParams.same(Tensor4(rng.normal(size=(3, 2, 3, 3))), rng.normal(size=3))
K = 9

zero = Tensor4(np.zeros((1, 2 * K, 6, 6)))
ones = Tensor4(np.ones((1, K, 6, 6)))
gap = np.abs(deform_conv2d(x, p, zero, ones).data - conv2d(x, p).data).max()
print(f"zero offsets vs plain conv: max difference {gap:.1e}")

down = np.zeros((1, 2 * K, 6, 6))
down[:, 0::2] = 1.0  # every tap reads one row lower
ys, xs = sampling_positions(down, 3, 3)
print("tap positions for output pixel (2, 2):")
for k in range(K):
    print(f"  tap {k}: row {ys[0, k, 2, 2]:.0f}, col {xs[0, k, 2, 2]:.0f}")

shifted = deform_conv2d(x, p, Tensor4(down), ones).data
reference = conv2d(Tensor4(np.roll(x.data, -1, axis=2)), p).data
print(f"interior match with a rolled input: {np.abs(shifted - reference)[..., 1:4, 1:5].max():.1e}")
