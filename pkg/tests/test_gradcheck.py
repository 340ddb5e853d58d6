import beartype  # to trigger the runtime typechecking
import pytest
from loguru import logger

from temporal_lattice import autodiff as ad
from temporal_lattice.gradcheck import REGISTRY, TOLERANCE, TRIALS, relative_error, run_all, run_gradcheck
from temporal_lattice.selfcheck import run_selfcheck


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_analytic_gradient_matches_central_differences(name, seed):
    result = run_gradcheck(name, seed=seed, trials=1)
    logger.info(f"✓ {name} seed {seed}: {result.error:.2e}")
    assert result.passed, f"{name} seed {seed}: relative error {result.error:.2e} >= {TOLERANCE}"


def test_default_check_covers_five_fixtures():
    result = run_gradcheck("minimum")
    assert TRIALS >= 5
    assert result.trials == TRIALS
    assert result.passed


def test_worst_fixture_decides_the_result():
    worst = max(run_gradcheck("row_norm", seed=seed, trials=1).error for seed in range(TRIALS))
    assert run_gradcheck("row_norm", seed=0).error == pytest.approx(worst)
    with pytest.raises(ValueError):
        run_gradcheck("row_norm", trials=0)


def test_every_primitive_has_a_check():
    assert set(ad.PRIMITIVES) <= set(REGISTRY)
    for operator in ("pointnet_aggregate", "lattice_convolution", "downsample", "upsample", "deform_slice", "aflow_fuse"):
        assert operator in REGISTRY


@pytest.mark.parametrize("name", ["matmul", "lattice_convolution", "gru_fuse", "aflow_fuse"])
def test_corrupted_gradient_is_caught(name):
    assert not run_gradcheck(name, seed=1, corrupt=True).passed


def test_relative_error_of_vanishing_gradients():
    assert relative_error(ad.constant([0.0]).data, ad.constant([0.0]).data) == 0.0


def test_run_all_rejects_unknown_corruption_target():
    with pytest.raises(KeyError):
        run_all(corrupt="no_such_operator")


def test_selfcheck_reports_every_check():
    results = run_selfcheck(seed=0)
    assert all(r.passed for r in results), [r for r in results if not r.passed]
    kinds = {r.kind for r in results}
    assert kinds == {"gradient", "invariant"}
    assert sum(r.kind == "gradient" for r in results) == len(REGISTRY)


def test_selfcheck_fails_when_a_gradient_is_corrupted():
    results = run_selfcheck(seed=0, corrupt="tanh")
    failed = [r.name for r in results if not r.passed]
    assert failed == ["tanh"]
