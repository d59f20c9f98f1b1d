import numpy as np
import pytest

from crbjm.estimation import fit_cca
from crbjm.simulation import GeneratorConfig, simulate_cohort
from crbjm.survival import fit_survival


@pytest.fixture(scope="session")
def ex_setup():
    """Small extrapolation-scenario cohort with survival fit and CCA."""
    config = GeneratorConfig(n=250, seed=42, variant="ex")
    dataset, truth = simulate_cohort(config)
    survival = fit_survival(dataset)
    cca = fit_cca(dataset, config.spec(), survival, variant="ex")
    return {"config": config, "dataset": dataset, "truth": truth,
            "survival": survival, "cca": cca}


@pytest.fixture(scope="session")
def tp_setup():
    """Small two-part-scenario cohort with survival fit and CCA."""
    config = GeneratorConfig(n=300, seed=43, variant="tp", weibull_intercept=2.3)
    dataset, truth = simulate_cohort(config)
    survival = fit_survival(dataset)
    cca = fit_cca(dataset, config.spec(), survival, variant="tp")
    return {"config": config, "dataset": dataset, "truth": truth,
            "survival": survival, "cca": cca}
