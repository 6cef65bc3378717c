import time

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plane_manifest(tmp_path_factory):
    from _helpers import plane_manifest as build

    return build(tmp_path_factory.mktemp("plane"))


@pytest.fixture(scope="session")
def plane_fits(plane_manifest):
    """Calibrated plane fits with and without the surface-alignment term: {lambda_sdf: (scene, report)}."""
    from _helpers import PLANE_FIT, PLANE_FIT_SECONDS, PLANE_LAMBDA_SDF, PLANE_POINTS

    from skyforge.sugar import FitConfig, fit_scene, init_from_depth

    torch.set_num_threads(1)
    init = init_from_depth(plane_manifest, PLANE_POINTS, seed=0)
    fits = {}
    for lam in (0.0, PLANE_LAMBDA_SDF):
        t0 = time.perf_counter()
        fits[lam] = fit_scene(plane_manifest, init, FitConfig(lambda_sdf=lam, **PLANE_FIT))
        PLANE_FIT_SECONDS[lam] = time.perf_counter() - t0
    return fits


# -- acceptance summary --------------------------------------------------------------

_CRITERIA: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        name = report.nodeid.split("::")[-1].split("[")[0]
        _CRITERIA.setdefault(name, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        ok = all(o == "passed" for o in _CRITERIA[name])
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num} {label:<40} {'PASS' if ok else 'FAIL'}")
