import numpy as np
import pytest

from morphfit.geometry import TriangleMesh
from morphfit.synth import SynthSpec, generate_model


@pytest.fixture(scope="session")
def small_model():
    return generate_model(SynthSpec(n_vertices=900, n_components=6, seed=11))


@pytest.fixture(scope="session")
def model():
    return generate_model(SynthSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grid_plane(n=20, spacing=1.0, z=0.0):
    """Triangulated n x n grid in the plane z = const."""
    xs = np.arange(n) * spacing
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    verts = np.stack([xx.ravel(), yy.ravel(), np.full(n * n, z)], axis=1)
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            faces += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    return TriangleMesh(verts, np.array(faces))


def random_mesh(rng, n_faces=50, n_verts=40, scale=10.0):
    verts = rng.normal(size=(n_verts, 3)) * scale
    faces = np.array([rng.choice(n_verts, size=3, replace=False) for _ in range(n_faces)])
    return TriangleMesh(verts, faces)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
