import numpy as np
import pytest

from stroke_eit.mesh import HeadGeometrySpec, generate_head_mesh


@pytest.fixture(scope="session")
def mesh2d():
    """Default dense 2D training-geometry mesh."""
    return generate_head_mesh(HeadGeometrySpec.default_2d(), 2, "dense")


@pytest.fixture(scope="session")
def mesh2d_coarse():
    return generate_head_mesh(HeadGeometrySpec.default_2d(), 2, "coarse")


@pytest.fixture(scope="session")
def small2d():
    """Cheap 2D mesh for unit tests that do many solves."""
    return generate_head_mesh(HeadGeometrySpec(target_element_size=0.008), 2, "dense")


@pytest.fixture(scope="session")
def small3d():
    return generate_head_mesh(HeadGeometrySpec(electrode_count=32, target_element_size=0.02), 3, "dense")


@pytest.fixture(scope="session")
def mesh3d_coarse():
    return generate_head_mesh(HeadGeometrySpec.default_3d(), 3, "coarse")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(out) -> dict:
    """Pipeline configuration small enough to run every subcommand in seconds."""
    return {
        "outputDir": str(out),
        "mesh2d": {"target_element_size": 0.012, "electrode_refinement_levels": 0},
        "mesh3d": {"target_element_size": 0.03},
        "moForwardMesh2d": {"target_element_size": 0.01, "electrode_refinement_levels": 0},
        "dataset": {"count": 6, "splits": {"train": 2, "val": 2, "test": 2}},
        "mo": {"cases": 1, "maxIterations": 3},
        "train": {"maxEpochs": 2, "batchSize": 2},
        "model": {"channels": [4, 6, 8, 10], "convsPerLevel": 1, "poolKeepFraction": 0.5},
        "growth3d": {"cases": [["40-40", 0.04, 0.04], ["30-40", 0.03, 0.04]]},
    }


PIPELINE = ("gen-mesh", "gen-data", "recon-ld", "recon-mo", "train", "postprocess", "evaluate", "report")


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; all of them are echoed at the end of the run."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
