"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation (same ordering of
floating point work) so both backends agree to a few ulps.
"""
import numpy as np

BACKEND = "python"


def _circular_order(pos):
    return np.argsort(pos, kind="stable")


def _wrap(d, ring_length):
    d = np.where(d < 0.0, d + ring_length, d)
    return np.where(d >= ring_length, d - ring_length, d)


def ring_gaps(pos, ring_length, vehicle_length):
    """Bumper-to-bumper gap from every vehicle to its circular leader."""
    order = _circular_order(pos)
    leader = np.empty(len(pos), dtype=np.int64)
    leader[order] = np.roll(order, -1)
    head = _wrap(pos[leader] - pos, ring_length)
    return head - vehicle_length, leader


def ring_step(pos, vel, is_cav, actions, accel_out, dt, ring_length,
              vehicle_length, v0, t_headway, s0, a_max, b_comf, delta,
              max_accel, max_decel):
    """Advance the ring one Euler step in place; return True on collision."""
    n = len(pos)
    gaps, leader = ring_gaps(pos, ring_length, vehicle_length)
    sqrt_ab = np.sqrt(a_max * b_comf)
    for i in range(n):
        if is_cav[i]:
            u = min(max(actions[i], -1.0), 1.0)
            a = u * max_accel if u >= 0.0 else u * max_decel
        else:
            s = gaps[i]
            if s <= 0.0:
                a = -max_decel
            else:
                v = vel[i]
                dv = v - vel[leader[i]]
                dyn = v * t_headway + v * dv / (2.0 * sqrt_ab)
                s_star = s0 + (dyn if dyn > 0.0 else 0.0)
                ratio = s_star / s
                a = a_max * (1.0 - (v / v0) ** delta - ratio * ratio)
                a = min(max(a, -max_decel), max_accel)
        accel_out[i] = a
    for i in range(n):
        v = vel[i] + accel_out[i] * dt
        vel[i] = v if v > 0.0 else 0.0
        x = pos[i] + vel[i] * dt
        if x >= ring_length:
            x -= ring_length
        pos[i] = x
    gaps, _ = ring_gaps(pos, ring_length, vehicle_length)
    return bool(np.any(gaps <= 0.0))


def ring_observe(pos, vel, agent_idx, ring_length, v_desired, out):
    """Fill ``out[k]`` with the 6-feature observation of vehicle agent_idx[k]."""
    n = len(pos)
    order = _circular_order(pos)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    for k, i in enumerate(agent_idx):
        r = rank[i]
        lead = order[(r + 1) % n]
        foll = order[(r - 1) % n]
        d_lead = _wrap(pos[lead] - pos[i], ring_length)
        d_foll = _wrap(pos[i] - pos[foll], ring_length)
        out[k, 0] = pos[i] / ring_length
        out[k, 1] = vel[i] / v_desired
        out[k, 2] = d_lead / ring_length
        out[k, 3] = vel[lead] / v_desired
        out[k, 4] = d_foll / ring_length
        out[k, 5] = vel[foll] / v_desired
    return out


def discounted_reverse_cumsum(x, gamma, init=0.0):
    """out[t] = x[t] + gamma * out[t+1], with out[T] = init."""
    out = np.empty(len(x), dtype=np.float64)
    acc = init
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + gamma * acc
        out[t] = acc
    return out
