#!/usr/bin/env python3
"""Tour of the reverse-mode engine: tapes, gradients, and the checker.

Run:  python3 demos/01_autodiff_basics.py
"""
import numpy as np

from cgl import autodiff as ad

# A tape records one forward pass. Leaves are the inputs you want
# gradients for; everything else is a constant.
tape = ad.Tape()
w = tape.leaf(np.array([[0.5, -1.0], [2.0, 0.25]]))
x = ad.constant(np.array([1.0, 3.0]))

y = ad.softmax(ad.matmul(x, w))
loss = ad.reduce_sum(ad.mul(y, np.array([1.0, -1.0])))
loss.backward()

print("softmax output:", y.values)
print("d loss / d w:\n", w.grad)

# The gradient checker compares the tape against central finite
# differences, one parameter entry at a time.
params = {"w": np.array([[0.5, -1.0], [2.0, 0.25]])}


def program():
    t = ad.Tape()
    leaf = t.leaf(params["w"])
    out = ad.softmax(ad.matmul(np.array([1.0, 3.0]), leaf))
    return ad.reduce_sum(ad.mul(out, np.array([1.0, -1.0]))), {"w": leaf}


report = ad.check_gradients(program, params, step=1e-6)
print(report.summary())

# Tapes are single use: a second backward is a hard error.
try:
    loss.backward()
except ad.TapeError as exc:
    print("second backward rejected:", exc)
