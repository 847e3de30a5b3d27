import numpy as np
import pytest

from ecoreg.data_model import Microdata, Schema, VariableSpec
from ecoreg.featurizer import FeaturizerConfig
from ecoreg.io import SyntheticSpec, generate_synthetic


def small_schema(interactions=True):
    variables = (
        VariableSpec.categorical("sex", ["male", "female"]),
        VariableSpec.categorical("race", ["white", "black", "hispanic", "asian"]),
        VariableSpec.real("age"),
        VariableSpec.real("income"),
    )
    pairs = (("sex", "race"), ("race", "age"), ("age", "income")) if interactions else ()
    return Schema(variables, pairs)


def random_microdata(schema, n=200, n_regions=5, seed=0):
    rng = np.random.default_rng(seed)
    cols = {}
    for v in schema.variables:
        if v.is_categorical:
            cols[v.name] = rng.integers(0, len(v.levels), size=n)
        else:
            cols[v.name] = rng.normal(40.0, 12.0, size=n)
    regions = np.array([f"R{k}" for k in rng.integers(0, n_regions, size=n)])
    return Microdata(schema, regions, rng.uniform(1.0, 50.0, size=n), cols)


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def microdata(schema):
    return random_microdata(schema)


@pytest.fixture(scope="session")
def synthetic():
    spec = SyntheticSpec(
        small_schema(),
        n_regions=120,
        samples_per_region=(40, 80),
        effects={"sex": np.array([[0.0, 1.0]]), "race": 1.5},
        featurizer=FeaturizerConfig(rff_features=8, seed=3),
        count_scale=0.2,
        seed=11,
    )
    return generate_synthetic(spec)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
