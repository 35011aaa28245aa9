"""Shared fixtures."""

from contextlib import contextmanager
from time import perf_counter

import numpy as np
import pytest

from slidesift.raster import RasterImage

_CRITERIA_LINES: list[str] = []


def half_noise_half_white(seed: int = 1234, width: int = 200, height: int = 100) -> RasterImage:
    """Left half uniform RGB noise, right half pure white."""
    rng = np.random.default_rng(seed)
    px = np.full((height, width, 3), 255, dtype=np.uint8)
    px[:, : width // 2] = rng.integers(0, 256, size=(height, width // 2, 3), dtype=np.uint8)
    return RasterImage(px)


@pytest.fixture
def noise_white_image() -> RasterImage:
    return half_noise_half_white()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line for an acceptance check.

    The body may fill ``info["note"]`` with a short result summary.
    """

    @contextmanager
    def record(name: str):
        info: dict = {}
        start = perf_counter()
        try:
            yield info
        except BaseException as exc:
            first = (str(exc).strip().splitlines() or [""])[0]
            line = f"FAIL  {name} ({perf_counter() - start:.2f}s): {type(exc).__name__} {first}"
            raise
        else:
            note = info.get("note", "")
            line = f"PASS  {name} ({perf_counter() - start:.2f}s){': ' + note if note else ''}"
        finally:
            _CRITERIA_LINES.append(line)
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA_LINES:
            terminalreporter.write_line(line)
