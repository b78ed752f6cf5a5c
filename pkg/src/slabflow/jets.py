"""Truncated time-Taylor series ("jets") over numpy fields.

A jet is a plain list of Taylor coefficients [c0, c1, ...] so that
q(t) = sum_a c_a t^a; the a-th time derivative at t = 0 is a! * c_a.
Binary operations truncate to the shorter operand length, which is exactly
the set of orders both operands determine.  Repeated time differentiation of
the momentum equations is realized by extending a velocity jet one
coefficient at a time from the right-hand-side jet.
"""

from __future__ import annotations

import math

import numpy as np


def const_jet(x, length=1):
    """Jet of a time-independent quantity."""
    return [x] + [np.zeros_like(x) for _ in range(length - 1)]


def jlen(*jets):
    return min(len(X) for X in jets)


def jadd(X, Y):
    n = jlen(X, Y)
    return [X[a] + Y[a] for a in range(n)]


def jsub(X, Y):
    n = jlen(X, Y)
    return [X[a] - Y[a] for a in range(n)]


def jneg(X):
    return [-c for c in X]


def jscale(s, X):
    return [s * c for c in X]


def jmul(X, Y):
    """Cauchy product (elementwise in space)."""
    n = jlen(X, Y)
    return [sum(X[m] * Y[a - m] for m in range(a + 1)) for a in range(n)]


def jein(subscripts, X, Y):
    """Cauchy product with an einsum contraction per term."""
    n = jlen(X, Y)
    return [sum(np.einsum(subscripts, X[m], Y[a - m]) for m in range(a + 1))
            for a in range(n)]


def jpow(X, p):
    """X^p for real p via the power-series recurrence
    P_n = (1/(n X_0)) sum_{k=1..n} (k(p+1) - n) X_k P_{n-k}."""
    n = len(X)
    P = [np.power(X[0], p)]
    for m in range(1, n):
        acc = sum((k * (p + 1) - m) * X[k] * P[m - k] for k in range(1, m + 1))
        P.append(acc / (m * X[0]))
    return P


def jrecip(X):
    return jpow(X, -1.0)


def jsqrt(X):
    return jpow(X, 0.5)


def jdt(X):
    """Time-derivative jet: coefficient a of dX/dt is (a+1) X_{a+1}."""
    return [(a + 1) * X[a + 1] for a in range(len(X) - 1)]


def jint(X, c0):
    """Antiderivative jet with value c0 at t = 0."""
    return [c0] + [X[a] / (a + 1) for a in range(len(X))]


def japply(fn, X):
    """Apply a linear, time-independent operator coefficientwise."""
    return [fn(c) for c in X]


def jstack(jets, axis=-1):
    """Stack component jets into one jet of stacked arrays."""
    n = jlen(*jets)
    return [np.stack([X[a] for X in jets], axis=axis) for a in range(n)]


def jeval(X, t):
    """Evaluate the truncated series at time t."""
    out = np.zeros_like(X[0])
    for a in reversed(range(len(X))):
        out = out * t + X[a]
    return out


def deriv(X, a):
    """a-th time derivative at t = 0: a! * X_a."""
    return math.factorial(a) * X[a]


def jcof3(M):
    """Cofactor jet of a (..., 3, 3) matrix jet."""
    n = len(M)
    out = [np.empty_like(M[a]) for a in range(n)]
    for i in range(3):
        i1, i2 = (i + 1) % 3, (i + 2) % 3
        for k in range(3):
            k1, k2 = (k + 1) % 3, (k + 2) % 3
            t1 = jmul([m[..., i1, k1] for m in M], [m[..., i2, k2] for m in M])
            t2 = jmul([m[..., i1, k2] for m in M], [m[..., i2, k1] for m in M])
            for a in range(n):
                out[a][..., i, k] = t1[a] - t2[a]
    return out
