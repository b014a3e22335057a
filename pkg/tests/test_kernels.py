import os
import subprocess
import sys

import numpy as np
import pytest

from magpc import config, kernels
from magpc.engine import run_agents
from magpc.regret import DacProblem
from magpc.runner import _agents

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available(), reason="extension not built")


def _setup(T=300):
    cfg = config.resolve(config.preset("tracking"), {"T": str(T), "trials": 1})
    return _agents(cfg, T, 0)


@needs_compiled
def test_run_loop_parity():
    sys_, Ks, gen, costs, confs = _setup()
    a = run_agents(sys_, confs, costs, gen, 300, backend="python")
    b = run_agents(sys_, confs, costs, gen, 300, backend="compiled")
    assert np.max(np.abs(a.x - b.x)) <= 1e-10 and np.max(np.abs(a.cost - b.cost)) <= 1e-10


@needs_compiled
def test_affine_maps_and_solver_parity():
    sys_, Ks, gen, costs, confs = _setup()
    tr = run_agents(sys_, confs, costs, gen, 300)
    c = confs[0]
    p = DacProblem(tr, sys_, 0, costs[0], c.H, K=c.K, backend="python", held="policies", K_list=Ks)
    q = DacProblem(tr, sys_, 0, costs[0], c.H, K=c.K, backend="compiled", held="policies", K_list=Ks)
    assert np.max(np.abs(p.J - q.J)) <= 1e-10
    P, qv, _ = p.quadratic(0)
    L = 2.0 * float(np.linalg.eigvalsh(P)[-1])
    xs = []
    for b in ("python", "compiled"):
        x = np.zeros(qv.size)
        kernels.get(b).fista_blocks_core(P, qv, c.dac_set.radii, x, 500, 0.0, L)
        xs.append(x)
    assert np.max(np.abs(xs[0] - xs[1])) <= 1e-10


def test_backend_lookup():
    assert kernels.get("python").__name__.endswith("_core_py")
    assert kernels.BACKEND in kernels.available()
    with pytest.raises(ValueError):
        kernels.get("gpu")


def test_env_forces_python():
    env = dict(os.environ, MAGPC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from magpc import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
