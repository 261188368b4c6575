"""The reference implementations themselves, checked against hand-worked values."""

import ast
import math
from pathlib import Path

import pytest

import ssae.oracles as oracles
from ssae.oracles import compare, finite_difference_grad, oracle_auroc, oracle_components, oracle_loss


def test_oracles_import_nothing_from_the_package():
    tree = ast.parse(Path(oracles.__file__).read_text())
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            assert node.level == 0 and not (node.module or "").startswith("ssae"), ast.dump(node)
        elif isinstance(node, ast.Import):
            assert not any(a.name.startswith("ssae") for a in node.names)


def _one_channel(rows):
    return [[[v] for v in row] for row in rows]


def test_loss_by_hand():
    # 1x2 image, one channel; left pixel modified
    x = _one_channel([[0.0, 0.0]])
    recon = _one_channel([[3.0, 4.0]])
    x_hat = _one_channel([[2.0, 0.0]])
    mask = [[1, 0]]
    # outside: |4| / 1, inside: |3| / 1
    assert oracle_loss("v1", recon, x, x_hat, mask, 0.5) == pytest.approx(0.5 * 4 + 0.5 * 3)
    assert oracle_loss("v2", recon, x, x_hat, mask, 0.5) == pytest.approx(0.5 * 4 - 0.5 * 3)
    # weight |x_hat - x| = 2 on the left pixel: ||2 * 3|| / 2 = 3
    assert oracle_loss("v3", recon, x, x_hat, mask, 0.25) == pytest.approx(0.25 * 4 - 0.75 * 3)


def test_loss_norm_is_global_over_channels():
    x = [[[0.0, 0.0], [0.0, 0.0]]]
    recon = [[[3.0, 4.0], [1.0, 0.0]]]
    mask = [[1, 0]]
    # inside: sqrt(9 + 16) / 2 elements; outside: 1 / 2 elements
    assert oracle_loss("v1", recon, x, x, mask, 0.5) == pytest.approx(0.5 * 0.5 + 0.5 * 2.5)


def test_loss_rejects_degenerate_input():
    x = _one_channel([[0.0, 0.0]])
    with pytest.raises(ValueError):
        oracle_loss("v1", x, x, x, [[1, 1]], 0.5)
    with pytest.raises(ValueError):
        oracle_loss("v3", x, x, x, [[1, 0]], 0.5)
    with pytest.raises(ValueError):
        oracle_loss("v4", x, x, x, [[1, 0]], 0.5)


def test_auroc_by_hand():
    assert oracle_auroc([0.1, 0.9], [0, 1]) == 1.0
    assert oracle_auroc([0.9, 0.1], [0, 1]) == 0.0
    assert oracle_auroc([0.5, 0.5], [0, 1]) == 0.5
    # pos {0.4, 0.8}, neg {0.2, 0.4, 0.9}: wins 1 + 0.5 + 2 = 3.5 of 6
    assert oracle_auroc([0.4, 0.8, 0.2, 0.4, 0.9], [1, 1, 0, 0, 0]) == pytest.approx(3.5 / 6)
    with pytest.raises(ValueError):
        oracle_auroc([1, 2], [1, 1])


def test_components_connectivity():
    diag = [[1, 0], [0, 1]]
    assert len(oracle_components(diag, 8)) == 1
    assert len(oracle_components(diag, 4)) == 2
    ring = [[1, 1, 1], [1, 0, 1], [1, 1, 1]]
    comps = oracle_components(ring, 4)
    assert len(comps) == 1 and len(comps[0]) == 8
    assert oracle_components([[0, 0]], 8) == []


def test_finite_difference_on_polynomial():
    f = lambda v: v[0] ** 3 + 2 * v[0] * v[1]
    g = finite_difference_grad(f, [1.0, 2.0], step=1e-4)
    assert g[0] == pytest.approx(3 + 4, rel=1e-7)
    assert g[1] == pytest.approx(2, rel=1e-7)


def test_compare_deviations():
    r = compare("c", 1.0, 1.5)
    assert r.abs_dev == 0.5
    assert r.rel_dev == pytest.approx(0.5 / 1.5)
    assert compare("z", 0.0, 0.0).rel_dev == 0.0
    assert math.isclose(compare("n", -2.0, 2.0).rel_dev, 2.0)
