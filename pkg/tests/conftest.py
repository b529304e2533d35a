import os
from pathlib import Path

import numpy as np
import pytest

from fedskip.datasets import find_mnist_files, make_synthetic

REL_FLOOR = 1e-6


def central_difference(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        fp = f(x)
        x[k] = orig - h
        fm = f(x)
        x[k] = orig
        g[k] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def synthetic_pair():
    return make_synthetic(600, 4, 6, seed=11), make_synthetic(200, 4, 6, seed=12)


def mnist_root():
    """Directory with the canonical MNIST files, or None."""
    candidates = []
    if os.environ.get("FEDSKIP_MNIST_DIR"):
        candidates.append(Path(os.environ["FEDSKIP_MNIST_DIR"]))
    if os.environ.get("FEDSKIP_DATA_DIR"):
        candidates.append(Path(os.environ["FEDSKIP_DATA_DIR"]) / "mnist")
    for c in candidates:
        try:
            find_mnist_files(c)
            return c
        except FileNotFoundError:
            continue
    return None


def ucihar_root():
    candidates = []
    if os.environ.get("FEDSKIP_UCIHAR_DIR"):
        candidates.append(Path(os.environ["FEDSKIP_UCIHAR_DIR"]))
    if os.environ.get("FEDSKIP_DATA_DIR"):
        base = Path(os.environ["FEDSKIP_DATA_DIR"])
        candidates += [base / "ucihar", base / "UCI HAR Dataset"]
    for c in candidates:
        if (c / "train" / "X_train.txt").is_file():
            return c
    return None


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, passed, detail):
    """Remember one acceptance line; all of them are printed after the run.

    ``passed`` is True, False, or None for a criterion skipped for lack of data.
    """
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    line = f"criterion {number:>2}: {status}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
