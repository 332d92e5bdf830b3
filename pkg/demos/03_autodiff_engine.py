"""The tape-based reverse-mode autodiff engine underneath the networks.

Run:  python demos/03_autodiff_engine.py
"""
import numpy as np

import swarmcbf.autodiff as ad
from swarmcbf.autodiff import Tensor, Tape

print("== forward ops run as plain numpy without a tape ==")
x = Tensor([[1.0, -2.0, 3.0]], requires_grad=True)
print("relu:", ad.relu(x).data)
print("softmax of zeros:", ad.softmax(Tensor([0.0, 0.0]), axis=0).data)

print("\n== recording and differentiating ==")
W = Tensor(np.array([[0.5, -1.0], [2.0, 0.25], [0.0, 1.0]]), requires_grad=True)
with Tape() as tape:
    y = ad.matmul(x, W)            # (1, 2)
    loss = ad.tensor_sum(ad.mul(y, y))
    tape.backward(loss)
print("loss =", loss.item())
print("dloss/dW =\n", W.grad)

print("\n== gradients accumulate across reuse ==")
z = Tensor([3.0], requires_grad=True)
with Tape() as tape:
    tape.backward(ad.tensor_sum(ad.add(z, z)))
print("d(z+z)/dz =", z.grad, "(two paths, one accumulation)")

print("\n== checking against central finite differences ==")
rng = np.random.default_rng(0)
W1 = Tensor(rng.normal(size=(4, 16)) * 0.4, requires_grad=True)
W2 = Tensor(rng.normal(size=(16, 1)) * 0.4, requires_grad=True)
inputs = rng.normal(size=(8, 4))

def f():
    h = ad.relu(ad.matmul(Tensor(inputs), W1))
    return ad.tensor_sum(ad.matmul(h, W2))

err = ad.grad_check(f, [W1, W2])
print("max relative error over every coordinate:", err)

print("\n== groupwise attention primitives ==")
logits = Tensor(np.array([[1.0], [2.0], [0.5]]))
seg = np.array([0, 0, 1])
from swarmcbf.nets import segment_softmax
w = segment_softmax(logits, seg, 2)
print("per-group softmax:", w.data.ravel(), "-> groups sum to 1")
