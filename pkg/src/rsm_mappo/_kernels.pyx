# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for the ring-road simulator and return recursions.

Semantics are identical to ``_kernels_py``; see that module for reference.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport pow, sqrt

cnp.import_array()

BACKEND = "cython"


cdef void _order(const double[::1] pos, Py_ssize_t[::1] order) noexcept nogil:
    # stable insertion sort; n is tiny
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i, j, key
    for i in range(n):
        order[i] = i
    for i in range(1, n):
        key = order[i]
        j = i - 1
        while j >= 0 and pos[order[j]] > pos[key]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key


cdef inline double _wrap(double d, double ring_length) noexcept nogil:
    if d < 0.0:
        d = d + ring_length
    if d >= ring_length:
        d = d - ring_length
    return d


cdef void _leaders(const double[::1] pos, Py_ssize_t[::1] order,
                   Py_ssize_t[::1] leader) noexcept nogil:
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t k
    _order(pos, order)
    for k in range(n):
        leader[order[k]] = order[(k + 1) % n]


def ring_gaps(double[::1] pos, double ring_length, double vehicle_length):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i
    order = np.empty(n, dtype=np.intp)
    leader = np.empty(n, dtype=np.intp)
    gaps = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] o = order
    cdef Py_ssize_t[::1] l = leader
    cdef double[::1] g = gaps
    _leaders(pos, o, l)
    for i in range(n):
        g[i] = _wrap(pos[l[i]] - pos[i], ring_length) - vehicle_length
    return gaps, leader


def ring_step(double[::1] pos, double[::1] vel, const unsigned char[::1] is_cav,
              const double[::1] actions, double[::1] accel_out, double dt,
              double ring_length, double vehicle_length, double v0,
              double t_headway, double s0, double a_max, double b_comf,
              double delta, double max_accel, double max_decel):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t i
    cdef double a, u, s, v, dv, dyn, s_star, ratio, x
    cdef double sqrt_ab = sqrt(a_max * b_comf)
    cdef Py_ssize_t[::1] order = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] leader = np.empty(n, dtype=np.intp)
    cdef bint collided = False
    with nogil:
        _leaders(pos, order, leader)
        for i in range(n):
            if is_cav[i]:
                u = actions[i]
                if u > 1.0:
                    u = 1.0
                if u < -1.0:
                    u = -1.0
                a = u * max_accel if u >= 0.0 else u * max_decel
            else:
                s = _wrap(pos[leader[i]] - pos[i], ring_length) - vehicle_length
                if s <= 0.0:
                    a = -max_decel
                else:
                    v = vel[i]
                    dv = v - vel[leader[i]]
                    dyn = v * t_headway + v * dv / (2.0 * sqrt_ab)
                    s_star = s0 + (dyn if dyn > 0.0 else 0.0)
                    ratio = s_star / s
                    a = a_max * (1.0 - pow(v / v0, delta) - ratio * ratio)
                    if a > max_accel:
                        a = max_accel
                    if a < -max_decel:
                        a = -max_decel
            accel_out[i] = a
        for i in range(n):
            v = vel[i] + accel_out[i] * dt
            vel[i] = v if v > 0.0 else 0.0
            x = pos[i] + vel[i] * dt
            if x >= ring_length:
                x = x - ring_length
            pos[i] = x
        _leaders(pos, order, leader)
        for i in range(n):
            if _wrap(pos[leader[i]] - pos[i], ring_length) - vehicle_length <= 0.0:
                collided = True
    return collided


def ring_observe(double[::1] pos, double[::1] vel, const cnp.int64_t[::1] agent_idx,
                 double ring_length, double v_desired, double[:, ::1] out):
    cdef Py_ssize_t n = pos.shape[0]
    cdef Py_ssize_t m = agent_idx.shape[0]
    cdef Py_ssize_t k, i, r, lead, foll
    cdef Py_ssize_t[::1] order = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] rank = np.empty(n, dtype=np.intp)
    with nogil:
        _order(pos, order)
        for k in range(n):
            rank[order[k]] = k
        for k in range(m):
            i = agent_idx[k]
            r = rank[i]
            lead = order[(r + 1) % n]
            foll = order[(r - 1 + n) % n]
            out[k, 0] = pos[i] / ring_length
            out[k, 1] = vel[i] / v_desired
            out[k, 2] = _wrap(pos[lead] - pos[i], ring_length) / ring_length
            out[k, 3] = vel[lead] / v_desired
            out[k, 4] = _wrap(pos[i] - pos[foll], ring_length) / ring_length
            out[k, 5] = vel[foll] / v_desired
    return np.asarray(out)


def discounted_reverse_cumsum(const double[::1] x, double gamma, double init=0.0):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t t
    cdef double acc = init
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for t in range(n - 1, -1, -1):
            acc = x[t] + gamma * acc
            o[t] = acc
    return out
