import numpy as np
import pytest
from hypothesis import settings

from taylorflow.dapoly import DAContext, TruncatedPoly
from taylorflow.scenarios import Scenario, builtin_range_scenario

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_poly(rng, ctx, integer=False, scale=1.0):
    if integer:
        coef = rng.integers(-5, 6, size=ctx.size).astype(float)
    else:
        coef = rng.normal(scale=scale, size=ctx.size)
    return TruncatedPoly(ctx, coef)


def affine_scenario(**run):
    opts = dict(flow="gromov", order=None)
    opts.update(run)
    return Scenario(
        prior_mean=(1.0, -0.5),
        prior_cov=((2.0, 0.6), (0.6, 1.0)),
        model_type="affine",
        model_params={"H": [[1.0, 0.5], [-0.3, 1.2]], "b": [0.2, -0.1]},
        R=((0.5, 0.1), (0.1, 0.4)),
        y_obs=(2.0, 0.3),
        grid_bounds=(-6.0, 8.0, -6.0, 5.0),
        grid_resolution=400,
        name="affine",
        **opts,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def range_scenario():
    return builtin_range_scenario()


@pytest.fixture(scope="session")
def linear_scenario():
    return affine_scenario()


@pytest.fixture
def ctx23():
    return DAContext(2, 3)
