"""Time the compiled ring kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--steps 2000]
"""
import argparse
import timeit

import numpy as np

from rsm_mappo import _kernels_py
from rsm_mappo.env import RoadConfig, reset

try:
    from rsm_mappo import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def _episode(mod, road, steps):
    st = reset(road, 0)
    pos, vel = st.positions.copy(), st.speeds.copy()
    is_cav = np.ascontiguousarray(road.is_cav)
    acts = np.zeros(road.n_vehicles)
    acts[is_cav == 1] = 0.3
    accel = np.zeros(road.n_vehicles)
    obs = np.empty((road.n_cav, 6))
    idx = road.cav_indices
    p = road.idm
    for _ in range(steps):
        mod.ring_step(pos, vel, is_cav, acts, accel, road.dt, road.ring_length,
                      road.vehicle_length, p.v0, p.t_headway, p.s0, p.a_max, p.b_comf,
                      p.delta, road.max_accel, road.max_decel)
        mod.ring_observe(pos, vel, idx, road.ring_length, road.v_desired, obs)
    return pos


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args(argv)
    road = RoadConfig(epoch_steps=args.steps)
    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.append(("cython", _kernels_c))
    else:
        print("compiled extension not built; timing the fallback only")
    x = np.random.default_rng(0).standard_normal(250)
    times = {}
    for name, mod in backends:
        t_env = min(timeit.repeat(lambda: _episode(mod, road, args.steps),
                                  number=1, repeat=args.repeat))
        t_cum = min(timeit.repeat(lambda: mod.discounted_reverse_cumsum(x, 0.9),
                                  number=1000, repeat=args.repeat)) / 1000
        times[name] = (t_env, t_cum)
        print(f"{name:7s} step+observe: {1e6 * t_env / args.steps:8.2f} us/step   "
              f"reverse cumsum(250): {1e6 * t_cum:8.2f} us")
    if len(times) == 2:
        print(f"speedup  step+observe: {times['python'][0] / times['cython'][0]:.1f}x   "
              f"reverse cumsum: {times['python'][1] / times['cython'][1]:.1f}x")
    if len(backends) == 2:
        a = _episode(_kernels_py, road, 500)
        b = _episode(_kernels_c, road, 500)
        print("max position difference after 500 steps:", float(np.max(np.abs(a - b))))


if __name__ == "__main__":
    main()
