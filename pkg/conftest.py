import numpy as np
import pandas as pd
import pytest

from parity_forge.core import ColumnSpec, Dataset, Role, Scale
from parity_forge.simulation import SimConfig, simulate_data


def make_dataset(frame: pd.DataFrame, specs: list[ColumnSpec]) -> Dataset:
    levels = {}
    for spec in specs:
        if spec.scale == Scale.binary:
            levels[spec.name] = (0, 1)
        elif spec.scale == Scale.categorical:
            levels[spec.name] = tuple(sorted(frame[spec.name].astype(str).unique()))
    return Dataset(tuple(specs), frame, levels)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def sim_ds():
    return simulate_data(SimConfig(n=600, seed=3))


@pytest.fixture
def binary_outcome_ds(rng):
    """Protected z, a continuous and a count feature, and a binary response."""
    n = 400
    z = rng.integers(0, 2, n)
    x1 = rng.normal(z + 4.0, 1.0)
    x2 = rng.poisson(np.exp(-0.5 + 0.3 * z))
    y = (rng.random(n) < 1 / (1 + np.exp(-(x1 - 4.5 + 0.3 * x2)))).astype(int)
    frame = pd.DataFrame({"z": z, "x1": x1, "x2": x2, "y": y})
    specs = [
        ColumnSpec(name="z", scale=Scale.binary, role=Role.protected),
        ColumnSpec(name="x1", scale=Scale.continuous),
        ColumnSpec(name="x2", scale=Scale.count),
        ColumnSpec(name="y", scale=Scale.binary, role=Role.response),
    ]
    return make_dataset(frame, specs)
