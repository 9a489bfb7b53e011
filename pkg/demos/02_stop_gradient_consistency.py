"""
The symmetric stop-gradient consistency term
============================================

Two predictions of the same patch are pulled together with
|sg(a) - b| + |a - sg(b)|. The value is twice the plain L1 distance, but each
operand only gets gradient from the term in which it is live, so the
gradient is the same as the one-sided L1 rather than twice it.

A naive finite difference of the loss value therefore sees twice the
analytic gradient. The fair reference freezes the stopped operands at their
current values.

    python3 demos/02_stop_gradient_consistency.py
"""
import numpy as np

from emae import autodiff as ad
from emae import losses as L

a0 = np.array([[1.0, -2.0], [0.5, 3.0]])
b0 = np.array([[4.0, -1.0], [0.0, 2.5]])
overlap = np.array([1, 1])

a, b = ad.parameter(a0), ad.parameter(b0)
loss = L.pair_consistency_loss(a, b, overlap)
loss.backward()
print("value            :", loss.item(), "= 2 * mean|a - b| =", 2 * np.abs(a0 - b0).mean())
print("grad wrt a       :", a.grad.ravel())
print("sign(a - b) / 4  :", (np.sign(a0 - b0) / 4).ravel())

naive = ad.grad_check(lambda x: L.pair_consistency_loss(x, b0, overlap), a0, tol=1e-6)
frozen = ad.grad_check(
    lambda x: L.pair_consistency_loss(x, b0, overlap), a0, tol=1e-6,
    reference=lambda x: ad.mean(ad.abs_(ad.sub(x, b0))),
)
print("FD on the loss value, worst rel err:", round(naive.max_rel_error, 3))
print("FD on the frozen objective        :", frozen.max_rel_error)
