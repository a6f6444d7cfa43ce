"""Reference (numpy) implementation of the bag-encoder kernels.

The bag encoder is: patch adapter (FC+ReLU) -> attention head (FC+ReLU,
FC+ReLU, FC to one logit per patch) -> softmax over patches -> weighted sum.
``weights`` is the tuple (Wa, ba, W1, b1, W2, b2, W3, b3) with W3 of shape
(hidden, 1).
"""
import numpy as np


def bag_forward(x, weights):
    wa, ba, w1, b1, w2, b2, w3, b3 = weights
    h = x @ wa + ba
    np.maximum(h, 0.0, out=h)
    a1 = h @ w1 + b1
    np.maximum(a1, 0.0, out=a1)
    a2 = a1 @ w2 + b2
    np.maximum(a2, 0.0, out=a2)
    s = (a2 @ w3)[:, 0] + b3[0]
    s -= s.max()
    att = np.exp(s)
    att /= att.sum()
    pooled = att @ h
    return pooled, att, (x, h, a1, a2, att)


def bag_backward(cache, g_pooled, weights, grads):
    """Accumulate parameter gradients into ``grads`` (same order as weights)."""
    x, h, a1, a2, att = cache
    wa, ba, w1, b1, w2, b2, w3, b3 = weights
    gwa, gba, gw1, gb1, gw2, gb2, gw3, gb3 = grads
    gh = np.outer(att, g_pooled)
    g_att = h @ g_pooled
    gs = att * (g_att - att @ g_att)
    gw3 += a2.T @ gs[:, None]
    gb3 += gs.sum()
    ga2 = np.outer(gs, w3[:, 0])
    ga2 *= a2 > 0.0
    gw2 += a1.T @ ga2
    gb2 += ga2.sum(axis=0)
    ga1 = ga2 @ w2.T
    ga1 *= a1 > 0.0
    gw1 += h.T @ ga1
    gb1 += ga1.sum(axis=0)
    gh += ga1 @ w1.T
    gh *= h > 0.0
    gwa += x.T @ gh
    gba += gh.sum(axis=0)


def sgd_update(value, grad, velocity, lr, momentum, weight_decay):
    """In place: v <- mu*v - lr*(g + wd*theta); theta <- theta + v; g <- 0."""
    g = grad + weight_decay * value if weight_decay else grad
    velocity *= momentum
    velocity -= lr * g
    value += velocity
    grad.fill(0.0)
