"""Compiled log-domain Sinkhorn loop for the 1-D ``|x - y|`` ground cost.

On the line the Laplace kernel ``exp(-|x - y| / eps)`` splits into a left and
a right one-sided exponential, so one soft-min costs a prefix and a suffix
log-sum-exp over the sorted atoms instead of a dense n x m reduction. The
iterates are identical to the dense solver; only the kernel application is
cheaper.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _softmin(eps, x, split, y, h, prefix, suffix, out):
    """out_i = -eps * log sum_j exp(h_j - |x_i - y_j| / eps); y ascending.

    ``split[i]`` counts the y_j <= x_i.
    """
    m = y.shape[0]
    prefix[0] = -np.inf
    for j in range(m):
        prefix[j + 1] = _logaddexp(prefix[j], h[j] + y[j] / eps)
    suffix[m] = -np.inf
    for j in range(m - 1, -1, -1):
        suffix[j] = _logaddexp(suffix[j + 1], h[j] - y[j] / eps)
    for i in range(x.shape[0]):
        k = split[i]
        left = prefix[k] - x[i] / eps if k > 0 else -np.inf
        right = suffix[k] + x[i] / eps if k < m else -np.inf
        out[i] = -eps * _logaddexp(left, right)


@njit(cache=True)
def _violation(eps, f, f_next, mass):
    total = 0.0
    for i in range(f.shape[0]):
        if mass[i] > 0:
            total += mass[i] * abs(1.0 - math.exp((f[i] - f_next[i]) / eps))
    return total


@njit(cache=True)
def _with_potential(eps, logmass, pot, out):
    for j in range(pot.shape[0]):
        out[j] = logmass[j] + pot[j] / eps


@njit(cache=True)
def sinkhorn_l1_batch(xa, la, xb, lb, split_ab, split_ba, split_aa, split_bb,
                      schedule, relaxation, stage_tol, tol, max_iters):
    """Annealed Sinkhorn for a batch of problems with sorted atoms.

    Every annealing stage except the last is iterated until the marginal
    violation drops below ``stage_tol``; the last stage runs to ``tol``.
    The cross problem uses over-relaxed alternating updates, the two self
    problems the averaged symmetric update. Returns potentials plus the
    per-problem sweep count and final violation; a problem that exhausts
    ``max_iters`` sweeps stops early and reports its violation.
    """
    batch, n = xa.shape
    m = xb.shape[1]
    f_ab = np.zeros((batch, n))
    g_ba = np.zeros((batch, m))
    f_aa = np.zeros((batch, n))
    g_bb = np.zeros((batch, m))
    sweeps = np.zeros(batch, dtype=np.int64)
    violation = np.zeros(batch)
    size = max(n, m)
    prefix = np.empty(size + 1)
    suffix = np.empty(size + 1)
    h = np.empty(size)
    tmp_n = np.empty(n)
    tmp_m = np.empty(m)
    last = schedule.shape[0] - 1

    for p in range(batch):
        mass_a = np.exp(la[p])
        mass_b = np.exp(lb[p])
        eps = schedule[0]
        _softmin(eps, xa[p], split_ab[p], xb[p], lb[p], prefix, suffix, f_ab[p])
        _softmin(eps, xb[p], split_ba[p], xa[p], la[p], prefix, suffix, g_ba[p])
        _softmin(eps, xa[p], split_aa[p], xa[p], la[p], prefix, suffix, f_aa[p])
        _softmin(eps, xb[p], split_bb[p], xb[p], lb[p], prefix, suffix, g_bb[p])
        count = 0
        worst = 0.0
        for s in range(schedule.shape[0]):
            eps = schedule[s]
            target = tol if s == last else stage_tol
            # self problems
            while True:
                _with_potential(eps, la[p], f_aa[p], h)
                _softmin(eps, xa[p], split_aa[p], xa[p], h[:n], prefix, suffix, tmp_n)
                _with_potential(eps, lb[p], g_bb[p], h)
                _softmin(eps, xb[p], split_bb[p], xb[p], h[:m], prefix, suffix, tmp_m)
                v = max(_violation(eps, f_aa[p], tmp_n, mass_a), _violation(eps, g_bb[p], tmp_m, mass_b))
                if v < target or count >= max_iters:
                    break
                for i in range(n):
                    f_aa[p, i] = 0.5 * (f_aa[p, i] + tmp_n[i])
                for j in range(m):
                    g_bb[p, j] = 0.5 * (g_bb[p, j] + tmp_m[j])
                count += 1
            worst_self = v
            # cross problem
            while True:
                _with_potential(eps, lb[p], g_ba[p], h)
                _softmin(eps, xa[p], split_ab[p], xb[p], h[:m], prefix, suffix, tmp_n)
                v = _violation(eps, f_ab[p], tmp_n, mass_a)
                if v < target or count >= max_iters:
                    break
                for i in range(n):
                    f_ab[p, i] = (1.0 - relaxation) * f_ab[p, i] + relaxation * tmp_n[i]
                _with_potential(eps, la[p], f_ab[p], h)
                _softmin(eps, xb[p], split_ba[p], xa[p], h[:n], prefix, suffix, g_ba[p])
                count += 1
            worst = max(v, worst_self)
            if count >= max_iters and worst >= target:
                break
        sweeps[p] = count
        violation[p] = worst
    return f_ab, g_ba, f_aa, g_bb, sweeps, violation
