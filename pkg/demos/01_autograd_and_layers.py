"""
Autograd and layers
===================

A walk through the tensor library: build a tiny graph, read its gradients,
check them against central differences, then push a volume through one
residual block.
"""

# %%
import numpy as np

from tripletvol.layers import ResidualBlock, conv3d, prelu
from tripletvol.tensor import Tensor, backward, finite_diff_gradient, no_grad

rng = np.random.default_rng(0)

# %% [markdown]
# A scalar built from a few ops. ``backward`` returns a dict from leaf
# tensors to gradient arrays.

# %%
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
loss = ((x * x) * 0.5).sum()
grads = backward(loss)
print("d/dx of sum(x^2)/2 equals x:", np.allclose(grads[x], x.data))

# %% [markdown]
# The same gradient by central differences, done under ``no_grad``.

# %%
numeric = finite_diff_gradient(lambda t: ((t * t) * 0.5).sum(), x.data.copy(), h=1e-5)
print("max |analytic - numeric|:", np.abs(grads[x] - numeric).max())

# %% [markdown]
# A 3x3x3 convolution with an identity kernel leaves the input unchanged,
# and PReLU scales negatives by its slope.

# %%
vol = Tensor(rng.normal(size=(1, 1, 6, 6, 4)))
kernel = np.zeros((1, 1, 3, 3, 3))
kernel[0, 0, 1, 1, 1] = 1.0
out = conv3d(vol, Tensor(kernel), padding=1)
print("identity kernel:", np.allclose(out.data, vol.data))
print("prelu:", prelu(Tensor(np.array([[-2.0, 3.0]])), [0.25, 0.25]).data)

# %% [markdown]
# One residual block at stride 2 halves every extent and widens channels.

# %%
block = ResidualBlock(1, 8, stride=2, rng=rng)
with no_grad():
    h = block(Tensor(rng.normal(size=(2, 1, 32, 32, 16)).astype(np.float32)))
print("residual block output:", h.shape)
print("parameters:", sum(p.size for p in block.parameters()))
