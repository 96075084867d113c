"""Smoke test for the pycpkrylov extension.

Uses an installed module when available, otherwise the library built by
`cargo build --release -p pycpkrylov --features extension-module`.
"""

import importlib
import pathlib
import shutil
import sys
import tempfile


def load():
    try:
        return importlib.import_module("pycpkrylov")
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libpycpkrylov.so"
        if lib.exists():
            tmp = pathlib.Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "pycpkrylov.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("pycpkrylov")
    raise SystemExit("pycpkrylov not built; see README")


def close(a, b, tol):
    return max(abs(u - v) for u, v in zip(a, b)) <= tol


def main():
    cp = load()

    micro = cp.System([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]], [[1.0]], [0.0, 0.0], [1.0])
    r = cp.solve(micro)
    assert r.converged, r
    assert close(r.x, [0.5, 0.0], 1e-10) and close(r.y, [-0.5], 1e-10), (r.x, r.y)

    sys_ = cp.System.random(30, 8, seed=3, c_rank=4, zero_b2=False)
    xs, ys = cp.direct_solve(sys_)
    for method in ("cg", "cg-lanczos", "minres", "symmlq", "gmres", "dqgmres"):
        r = cp.solve(sys_, method=method, atol=0.0, rtol=1e-10, restart=40)
        assert r.converged, (method, r)
        assert close(r.x + r.y, xs + ys, 1e-6), method
        assert len(r.history) == r.iterations + 1
        print(f"{method:>10}: {r.iterations} iterations, residual {r.final_residual:.2e}")

    eigs, near_one = cp.spectrum(sys_)
    assert len(eigs) == 38 and near_one >= 2 * 8 - 4, near_one

    try:
        cp.direct_solve(cp.System.counterexample())
    except ValueError as e:
        assert "singular" in str(e)
    else:
        raise AssertionError("counterexample should be singular")

    ok, outer, inner, kkt = cp.toy_ip(10, 4, seed=1)
    assert ok and kkt < 1e-6, (ok, outer, kkt)
    print(f"toy IP: {outer} outer, {inner} inner iterations, KKT {kkt:.1e}")

    try:
        cp.solve(micro, method="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("bad method accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
