"""Closest-point kernel timings: compiled extension vs numpy fallback.

    python benchmarks/bench_kernels.py [--queries N] [--repeat R]

Both backends answer the same queries against the synthetic face mesh and
must return identical faces; the script prints the best-of-R wall time for
each and the speedup.
"""
import argparse
import time

import numpy as np

from morphfit import _fallback
from morphfit.geometry import MeshQuery
from morphfit.synth import SynthSpec, generate_model, sample_surface

try:
    from morphfit import _kernels
except ImportError:
    _kernels = None


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--queries", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--noise", type=float, default=1.0, help="query offset from the surface, mm")
    args = ap.parse_args()

    model = generate_model(SynthSpec())
    mesh = model.mean_mesh()
    mq = MeshQuery(mesh)
    rng = np.random.default_rng(0)
    pts, _ = sample_surface(mesh, args.queries, rng)
    pts += rng.normal(scale=args.noise, size=pts.shape)
    call = (pts, mq._verts, mq._faces, *mq._bvh, mq._tie_scale)

    print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces; {args.queries} queries")
    t_py, ref = best_time(lambda: _fallback.closest_points_bvh(*call), args.repeat)
    print(f"numpy fallback : {t_py * 1e3:9.1f} ms  ({args.queries / t_py:,.0f} queries/s)")
    if _kernels is None:
        print("compiled kernel: not built")
        return
    t_c, got = best_time(lambda: _kernels.closest_points_bvh(*call), args.repeat)
    print(f"compiled kernel: {t_c * 1e3:9.1f} ms  ({args.queries / t_c:,.0f} queries/s)")
    print(f"speedup        : {t_py / t_c:9.1f}x")
    same_faces = np.array_equal(ref[1], got[1])
    max_dd = float(np.abs(np.sqrt(ref[3]) - np.sqrt(got[3])).max())
    print(f"agreement      : faces identical={same_faces}, max distance difference {max_dd:.1e} mm")


if __name__ == "__main__":
    main()
