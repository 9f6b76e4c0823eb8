"""Record a tiny computation on a tape, backpropagate, and check it numerically.

Run: python3 demos/01_tape_and_gradients.py
"""

import numpy as np

from sherl import autograph as ag

w = ag.parameter(np.array([[0.5, -1.0], [2.0, 0.3]]), name="w")
frozen = ag.parameter(np.eye(2), name="frozen", trainable=False)
x = ag.constant(np.array([[1.0, 2.0], [-1.0, 0.5]]))

with ag.Tape() as tape:
    with tape.origin("frozen-part"):
        h = ag.tanh(ag.matmul(x, frozen))     # nothing trainable upstream: not recorded
    with tape.origin("trained-part"):
        loss = ag.sum(ag.relu(ag.matmul(h, w)))

print("recorded nodes by origin:", tape.nodes_by_origin())
print("retained bytes by origin:", tape.retained_bytes_by_origin)

grads = ag.backward(tape, loss)
print("dloss/dw =\n", grads[w])
print("frozen weight received a gradient:", frozen in grads)


def value():
    return ag.sum(ag.relu(ag.matmul(ag.tanh(ag.matmul(x, frozen)), w)))


print(f"max relative error against central differences: {ag.grad_check(value, [w]):.2e}")
