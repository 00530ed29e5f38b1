import numpy as np
import pytest

from motion2infarct import synth
from motion2infarct.mesh import MeshSequence, VertexClass, extract_hybrid_input


@pytest.fixture(scope="session")
def small_cfg():
    return synth.SynthConfig(n_cases=6, endo_resolution=3, n_phases=6, rng_seed=3)


@pytest.fixture(scope="session")
def small_cases(small_cfg):
    return synth.generate(small_cfg)


@pytest.fixture
def small_case(small_cases):
    return small_cases[0]


def two_shell_mesh(n_phases=3, resolution=2, seed=0):
    """Concentric spheres with random per-phase wobble; endo radius 1, epi radius 2."""
    unit, tri = synth.icosphere(resolution)
    rng = np.random.default_rng(seed)
    nv = len(unit)
    pos = []
    for _ in range(n_phases):
        endo = unit * (1.0 + 0.05 * rng.standard_normal((nv, 1)))
        epi = unit * (2.0 + 0.05 * rng.standard_normal((nv, 1)))
        pos.append(np.concatenate([endo, epi]))
    classes = np.r_[np.full(nv, VertexClass.LV_ENDO), np.full(nv, VertexClass.LV_EPI)]
    mesh = MeshSequence(np.array(pos), np.concatenate([tri, tri + nv]), classes)
    return mesh, extract_hybrid_input(mesh)


@pytest.fixture
def shell_mesh():
    return two_shell_mesh()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
