import functools

import pytest

import coadapt as ca

REFERENCE_DIMS = (8, 32, 32, 16)


@functools.lru_cache(maxsize=32)
def reference_problem(seed=7, informativeness=None):
    """Generate the reference synthetic task and train its source model.

    Cached per (seed, informativeness) so repeated tests share the work.
    """
    kwargs = {"seed": seed}
    if informativeness is not None:
        kwargs["bank_informativeness"] = informativeness
    spec = ca.SyntheticSpec(**kwargs)
    source, target, bank, truth = ca.generate(spec)
    model = ca.train_source(
        source, REFERENCE_DIMS, ca.SourceTrainConfig(seed=seed)
    )
    return spec, source, target, bank, truth, model


@pytest.fixture
def reference():
    return reference_problem(7)
