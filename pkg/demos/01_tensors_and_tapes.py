"""Tensors, tapes, and reverse-mode gradients.

Builds a tiny computation twice: once recorded on a tape (gradients flow),
once tape-free (pure values), then sanity-checks one gradient entry against
a central finite difference.
"""

import numpy as np

from calign import autodiff as ad
from calign.autodiff import Tape, Tensor, backward, detach

rng = np.random.default_rng(0)

w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 3)))

print("== recorded pass ==")
tape = Tape()
hidden = ad.gelu(ad.matmul(x, w, tape), tape)
loss = ad.sum_all(hidden, tape)
print(f"loss = {loss.item():.6f}, tape recorded {len(tape)} ops")

backward(loss, tape)
print(f"dloss/dw[0,0] from the tape: {w.grad[0, 0]:+.8f}")

h = 1e-5
orig = w.data[0, 0]
w.data[0, 0] = orig + h
up = ad.sum_all(ad.gelu(ad.matmul(x, w), None)).item()
w.data[0, 0] = orig - h
down = ad.sum_all(ad.gelu(ad.matmul(x, w), None)).item()
w.data[0, 0] = orig
print(f"dloss/dw[0,0] by finite diff: {(up - down) / (2 * h):+.8f}")

print("\n== tape-free pass ==")
free = ad.gelu(ad.matmul(x, w, None), None)
print(f"same values: {np.array_equal(free.data, hidden.data)}, "
      f"requires_grad: {free.requires_grad}")

print("\n== stop-gradient ==")
w.grad = None
tape = Tape()
frozen_branch = ad.sum_all(ad.matmul(x, detach(w), tape), tape)
backward(frozen_branch, tape)
print(f"gradient through detach: {w.grad}  (never flows)")
