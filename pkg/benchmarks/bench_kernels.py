"""Compiled vs pure-Python episode kernel.

    python benchmarks/bench_kernels.py [--episodes N] [--json]

Rolls the same deterministic and noisy episodes through both backends,
checks that they agree, and prints episodes per second for each.
"""
from __future__ import annotations

import argparse
import json
import time
from importlib import resources

import numpy as np

from coolgen import _core, nn
from coolgen.family import Specification, make_env, sla_from_t_high
from coolgen.scene import gen_workload, load_scene


def _time(env, sizes, theta, noise, n: int) -> tuple[float, object]:
    t0 = time.perf_counter()
    for i in range(n):
        env.run_episode(sizes, theta, start=(i * 7) % env.max_start(), noise=noise)
    return (time.perf_counter() - t0) / n, env.run_episode(sizes, theta, start=0, noise=noise)


def main(argv=None) -> dict:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    scene = load_scene(resources.files("coolgen.data").joinpath("reference_scene.json"))
    env = make_env(scene, Specification(125, sla_from_t_high(25.0)), gen_workload(96 * 14, 11), None)
    sizes = (env.obs_dim, 32, 32, env.act_dim)
    theta = nn.init_policy(nn.MlpSpec(sizes), 0, out_scale=0.5)
    noise = np.random.default_rng(0).standard_normal((env.episode_steps, env.act_dim))

    results = {"backend": _core.BACKEND, "episode_steps": env.episode_steps}
    default = _core.run_episode
    try:
        _core.run_episode = _core.run_episode_python
        py_s, py_tr = _time(env, sizes, theta, noise, max(1, args.episodes // 10))
        results["python_ms_per_episode"] = 1e3 * py_s
        if _core.run_episode_compiled is not None:
            _core.run_episode = _core.run_episode_compiled
            cy_s, cy_tr = _time(env, sizes, theta, noise, args.episodes)
            results["compiled_ms_per_episode"] = 1e3 * cy_s
            results["speedup"] = py_s / cy_s
            results["max_abs_diff_t_zone"] = float(np.max(np.abs(py_tr.t_zone - cy_tr.t_zone)))
    finally:
        _core.run_episode = default

    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True))
    else:
        for k, v in results.items():
            print(f"{k:>26}: {v:.4g}" if isinstance(v, float) else f"{k:>26}: {v}")
    return results


if __name__ == "__main__":
    main()
