"""Tests for dominated-splitting and hyperbolic-bundle certification."""

import math

import numpy as np
import pytest

from centralshift.domination import (
    BundleSplitting,
    cat_splitting,
    check_domination,
    check_hyperbolic_bundle,
)
from centralshift.errors import CentralShiftError
from centralshift.model_systems import BASE_FRAME, LAMBDA_PLUS

INV_LAMBDA = 1.0 / LAMBDA_PLUS  # 0.3819660112501051...


def _bundle(col):
    basis = np.zeros((4, 1))
    basis[:3, 0] = BASE_FRAME[:, col]
    return basis


def test_cat_splitting_structure(cat):
    split = cat_splitting(cat)
    assert split.names == ("unstable", "central", "stable")
    q0 = None  # constant bundles ignore the base point
    bases = [b(q0) for b in split.bundles]
    assert all(b.shape == (4, 1) for b in bases)
    assert np.allclose(bases[0], _bundle(0), atol=1e-14)
    assert np.allclose(bases[1], _bundle(1), atol=1e-14)
    assert np.allclose(bases[2], _bundle(2), atol=1e-14)


def test_check_domination_exact_ratio(cat):
    report = check_domination(cat, cat_splitting(cat), m=1, samples=200, seed=0)
    assert report.passed
    assert report.m == 1
    assert report.sample_count == 200
    assert len(report.pairs) == 2
    for _i, _j, ratio in report.pairs:
        assert ratio == pytest.approx(INV_LAMBDA, abs=1e-9)


def test_check_domination_seed_independent_for_constant_cocycle(cat):
    r1 = check_domination(cat, cat_splitting(cat), m=1, samples=50, seed=1)
    r2 = check_domination(cat, cat_splitting(cat), m=1, samples=50, seed=2)
    for (_, _, a), (_, _, b) in zip(r1.pairs, r2.pairs):
        assert a == pytest.approx(b, abs=1e-9)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_check_domination_ratio_decays_geometrically(cat, m):
    report = check_domination(cat, cat_splitting(cat), m=m, samples=30, seed=0)
    for _, _, ratio in report.pairs:
        assert ratio == pytest.approx(INV_LAMBDA**m, rel=1e-6)
    assert report.passed


def test_check_domination_fails_on_swapped_order(cat):
    split = cat_splitting(cat)
    swapped = BundleSplitting(
        bundles=(split.bundles[2], split.bundles[1], split.bundles[0]),
        names=("stable", "central", "unstable"),
    )
    report = check_domination(cat, swapped, m=1, samples=30, seed=0)
    assert not report.passed
    for _, _, ratio in report.pairs:
        assert ratio == pytest.approx(LAMBDA_PLUS, abs=1e-6)


def test_check_domination_validates_inputs(cat):
    split = cat_splitting(cat)
    with pytest.raises(CentralShiftError):
        check_domination(cat, split, m=0, samples=10)
    single = BundleSplitting(bundles=(split.bundles[0],), names=("u",))
    with pytest.raises(CentralShiftError):
        check_domination(cat, single, m=1, samples=10)


def test_check_domination_report_json(cat):
    report = check_domination(cat, cat_splitting(cat), m=1, samples=20, seed=0)
    d = report.to_json_dict()
    assert d["passed"] is True
    assert d["m"] == 1
    assert len(d["pairs"]) == 2


def test_hyperbolic_bundle_stable_contracts(cat):
    split = cat_splitting(cat)
    assert check_hyperbolic_bundle(
        cat, split.bundles[2], k=1, mode="contracting", samples=30, seed=0
    )
    assert not check_hyperbolic_bundle(
        cat, split.bundles[2], k=1, mode="expanding", samples=30, seed=0
    )


def test_hyperbolic_bundle_unstable_expands(cat):
    split = cat_splitting(cat)
    assert check_hyperbolic_bundle(
        cat, split.bundles[0], k=1, mode="expanding", samples=30, seed=0
    )
    assert not check_hyperbolic_bundle(
        cat, split.bundles[0], k=1, mode="contracting", samples=30, seed=0
    )


def test_hyperbolic_bundle_central_is_neither(cat):
    split = cat_splitting(cat)
    for mode in ("contracting", "expanding"):
        assert not check_hyperbolic_bundle(
            cat, split.bundles[1], k=3, mode=mode, samples=30, seed=0
        )


def test_hyperbolic_bundle_rejects_bad_mode(cat):
    split = cat_splitting(cat)
    with pytest.raises(CentralShiftError):
        check_hyperbolic_bundle(cat, split.bundles[0], k=1, mode="sideways")
