#!/usr/bin/env python3
"""Benchmark the compiled node-sweep kernel against the numpy fallback.

Builds a synthetic foot fixture, constructs the deformation graph and one set
of closest-point correspondences, then times repeated full Gauss-Seidel
sweeps through both backends on identical starting states and cross-checks
that they land on the same transforms. Also times one end-to-end registration
per backend.

Usage:
    python benchmarks/compare_backends.py [--vertices-grid 71 70]
        [--nodes 500] [--k-influence 10] [--sweeps 20] [--repeats 3]
"""

import argparse
import time

import numpy as np

import defmark._native_py as native_py
from defmark.geometry import SpatialIndex, TriMesh, bbox_diagonal
from defmark.graph import build_deformation_graph
from defmark.solver import SolverParams, _BlockProblem, find_correspondences, register
from defmark.synthetic import foot_mesh, quadratic_bend

try:
    import defmark._native as native_c
except ImportError:
    native_c = None


def build_problem(args):
    mesh = foot_mesh(*args.vertices_grid)
    graph = build_deformation_graph(
        mesh.vertices, args.nodes, args.k_influence, 6, seed=0
    )
    target = quadratic_bend(mesh.vertices.points, mesh.vertices, 0.05)
    prob = _BlockProblem(graph, mesh.vertices.points, target, alpha=2000.0)
    corr = find_correspondences(prob.blend(), SpatialIndex(target))
    prob.set_correspondences(corr)
    return mesh, prob


def time_sweeps(make_problem, sweep_fn, n_sweeps, repeats):
    best = np.inf
    final = None
    for _ in range(repeats):
        prob = make_problem()
        order = np.arange(prob.node_count)
        t0 = time.perf_counter()
        for _ in range(n_sweeps):
            prob.sweep(order, sweep_fn=sweep_fn)
        best = min(best, time.perf_counter() - t0)
        final = prob
    return best, final


def time_register(mesh, backend_name):
    from defmark.model_io import LandmarkSet

    idx = np.linspace(0, mesh.vertex_count - 1, 12, dtype=int)
    lms = LandmarkSet([f"lm_{i}" for i in range(len(idx))], mesh.vertices.points[idx])
    target = TriMesh(
        quadratic_bend(mesh.vertices.points, mesh.vertices, 0.05), mesh.faces
    )
    # the backend is bound at import time; swap the dispatch for this run
    from defmark import backend as backend_mod

    impl = native_c if backend_name == "compiled" else native_py
    original = backend_mod.sweep_nodes
    backend_mod.sweep_nodes = impl.sweep_nodes
    try:
        params = SolverParams(
            node_count=min(500, mesh.vertex_count // 4), k_influence=8, seed=0
        )
        t0 = time.perf_counter()
        register(mesh, lms, target, params=params, rigid_init=False)
        return time.perf_counter() - t0
    finally:
        backend_mod.sweep_nodes = original


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--vertices-grid", type=int, nargs=2, default=(71, 70),
                        metavar=("N_THETA", "N_PHI"))
    parser.add_argument("--nodes", type=int, default=500)
    parser.add_argument("--k-influence", type=int, default=10)
    parser.add_argument("--sweeps", type=int, default=20)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    mesh, probe = build_problem(args)
    print(
        f"fixture: {mesh.vertex_count} vertices, {args.nodes} nodes, "
        f"k={args.k_influence}, diag={bbox_diagonal(mesh.vertices):.1f} mm"
    )
    print(f"timing {args.sweeps} full sweeps, best of {args.repeats} runs\n")

    make = lambda: build_problem(args)[1]  # noqa: E731
    t_py, state_py = time_sweeps(make, native_py.sweep_nodes, args.sweeps, args.repeats)
    per_py = 1e3 * t_py / args.sweeps
    print(f"{'backend':<10} {'total':>9} {'per sweep':>11}")
    print(f"{'python':<10} {t_py:>8.3f}s {per_py:>9.2f}ms")
    if native_c is None:
        print("compiled   (not built; run pip install -e . to compare)")
        return
    t_c, state_c = time_sweeps(make, native_c.sweep_nodes, args.sweeps, args.repeats)
    per_c = 1e3 * t_c / args.sweeps
    print(f"{'compiled':<10} {t_c:>8.3f}s {per_c:>9.2f}ms")
    print(f"\nspeedup: {t_py / t_c:.1f}x")

    dr = np.abs(state_py.R - state_c.R).max()
    dt = np.abs(state_py.T - state_c.T).max()
    dd = np.abs(state_py.D - state_c.D).max()
    print(f"agreement after {args.sweeps} sweeps: |dR|={dr:.2e} |dT|={dt:.2e} |dD|={dd:.2e}")

    print("\nend-to-end registration (rigid init off, bend target):")
    for name in ("python", "compiled"):
        seconds = time_register(mesh, name)
        print(f"  {name:<10} {seconds:6.2f}s")


if __name__ == "__main__":
    main()
