"""Shared fixtures plus the acceptance-criterion summary hook.

Tests marked ``@pytest.mark.criterion(n, "...")`` are collected into a
per-criterion PASS/FAIL table printed at the end of the run.
"""
from __future__ import annotations

import numpy as np
import pytest

from midshift.data import load_dataset
from midshift.synthetic import PhantomSpec, export_dataset, generate_dataset


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, description): acceptance criterion coverage"
    )
    config._criterion_runs = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        item.config._criterion_runs.append(
            (int(marker.args[0]), str(marker.args[1]), rep.outcome)
        )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    runs = getattr(config, "_criterion_runs", [])
    if not runs:
        return
    by_n: dict[int, tuple[str, list[str]]] = {}
    for n, desc, outcome in runs:
        by_n.setdefault(n, (desc, []))[1].append(outcome)
    terminalreporter.section("acceptance criteria")
    for n in sorted(by_n):
        desc, outcomes = by_n[n]
        if any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"[criterion {n:2d}] {status}  {desc}")


TINY_SPEC = dict(
    image_size=32,
    slices_per_case=4,
    labeled_slices_per_case=2,
    positive_fraction=0.75,
    shift_range_px=(2.0, 6.0),
    sigma_range_px=(4.0, 8.0),
    profile_sigma_slices=(1.0, 2.0),
)


@pytest.fixture(scope="session")
def tiny_spec() -> PhantomSpec:
    return PhantomSpec(**TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_cases(tiny_spec):
    return generate_dataset(tiny_spec, 8, 11)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tiny_cases, tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-data")
    export_dataset(tiny_cases, root)
    return root


@pytest.fixture(scope="session")
def tiny_volumes(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


def smooth_field(rng: np.random.Generator, size: int, max_mag: float, sigma: float = 8.0,
                 taper: bool = True) -> np.ndarray:
    """Random smooth 2-channel field, optionally tapered to zero at the border."""
    from scipy import ndimage

    f = ndimage.gaussian_filter(rng.standard_normal((2, size, size)), sigma=(0, sigma, sigma))
    if taper:
        win = np.hanning(size)
        f = f * win[None, :, None] * win[None, None, :]
    peak = np.max(np.hypot(f[0], f[1]))
    if peak > 0:
        f = f * (max_mag / peak)
    return f.astype(np.float64)
