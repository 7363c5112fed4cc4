import numpy as np
import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(autouse=True, scope="session")
def single_threaded_blas():
    # The suite runs thousands of small decompositions; multithreaded BLAS
    # only adds spin-wait overhead at these sizes.
    with threadpool_limits(limits=1, user_api="blas"):
        yield


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """One full evaluation of the bundled synthetic demo, shared by tests."""
    from mapss.demo import make_demo
    from mapss.pipeline import RunConfig, run_evaluation

    root = tmp_path_factory.mktemp("demo")
    config_path = make_demo(root, seed=0, n_systems=1)
    cfg = RunConfig.from_yaml(config_path)
    report = run_evaluation(cfg)
    return cfg, report
