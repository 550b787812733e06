"""Closed forms shared by several test modules."""

import numpy as np


def zero_control_second_moment_cost(a, sigma, c, q, m0, s0, jump_times, horizon):
    """q * int_0^T E[X_t^2] dt for dX = aX dt + sigma dW, X -> (1+c)X at the jumps, u = 0."""
    k = sigma**2 / (2 * a)
    e2 = m0**2 + s0**2
    t0, total = 0.0, 0.0
    for t1 in [*jump_times, horizon]:
        h = t1 - t0
        total += (e2 + k) * (np.exp(2 * a * h) - 1) / (2 * a) - k * h
        e2 = (e2 + k) * np.exp(2 * a * h) - k
        if t1 < horizon:
            e2 *= (1 + c) ** 2
        t0 = t1
    return q * total
