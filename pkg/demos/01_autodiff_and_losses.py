# %% [markdown]
# A tour of the tensor core and the LTX loss terms on toy inputs.

# %%
import numpy as np

from ltx import tensor as T
from ltx.core import loss_inv, loss_mask, loss_pred, loss_smooth, mask_blend

rng = np.random.default_rng(0)

# %% reverse mode on a tiny two-layer net
x = rng.normal(size=(5, 3))
w1 = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w2 = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)


def net():
    return T.sum(T.square(T.matmul(T.tanh(T.matmul(x, w1)), w2)))


T.backward(net())
print("dL/dw2 =\n", w2.grad)
print("worst relative error vs finite differences:", T.grad_check(net, [w1, w2]))

# %% the masking function: keep where m = 1, replace by z where m = 0
img = rng.uniform(size=(1, 4, 4))
m = np.zeros((4, 4))
m[1:3, 1:3] = 1.0
print(mask_blend(img, m, T.Tensor(0.5)).data[0].round(2))

# %% loss terms at their textbook values
print("pred, uniform over 2 classes:", loss_pred(T.Tensor([0.0, 0.0]), np.array([1.0, 0.0])).item())
print("mask, all 0.5:", loss_mask(np.full((7, 7), 0.5)).item())
print("inv, p_y = 0.5:", loss_inv(T.Tensor([0.0, 0.0]), np.array([1.0, 0.0])).item())
print("smooth, checkerboard:", loss_smooth(np.array([[0.0, 1.0], [1.0, 0.0]])).item())

# %% Adam on a quadratic bowl
p = T.Tensor(np.array([3.0, -2.0]), requires_grad=True)
opt = T.Adam([p], lr=0.1)
for _ in range(200):
    opt.zero_grad()
    T.backward(T.sum(T.square(p)))
    opt.step()
print("after 200 Adam steps:", p.data.round(4))
