import numpy as np
import pytest

from mladapt import kernels


def test_edit_distance_known_values():
    a = [ord(c) for c in "kitten"]
    b = [ord(c) for c in "sitting"]
    assert kernels.edit_distance(a, b) == 3
    assert kernels.edit_distance([], [1, 2]) == 2
    assert kernels.edit_distance([1, 2, 3], []) == 3
    assert kernels.edit_distance([1, 2], [1, 2]) == 0


@pytest.mark.parametrize("seed", range(20))
def test_edit_distance_paths_agree(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 5, rng.integers(0, 15))
    b = rng.integers(0, 5, rng.integers(0, 15))
    expected = kernels._edit_distance_py(
        a.astype(np.int64), b.astype(np.int64)
    )
    assert kernels._edit_distance_numpy(a, b) == expected
    if kernels.HAVE_NUMBA:
        assert kernels._edit_distance_numba(
            a.astype(np.int64), b.astype(np.int64)
        ) == expected


@pytest.mark.parametrize("seed", range(20))
def test_ctc_path_sum_paths_agree(seed):
    rng = np.random.default_rng((99, seed))
    frames = int(rng.integers(1, 6))
    vocab = int(rng.integers(2, 5))
    probs = rng.dirichlet(np.ones(vocab), size=frames)
    target = rng.integers(1, vocab, rng.integers(0, 4)).astype(np.int64)
    reference = kernels._ctc_path_sum_py(probs, target, 0)
    assert kernels._ctc_path_sum_numpy(probs, target, 0) == pytest.approx(
        reference, abs=1e-12
    )
    if kernels.HAVE_NUMBA:
        assert kernels._ctc_path_sum_numba(probs, target, 0) == pytest.approx(
            reference, abs=1e-12
        )


def test_ctc_path_sum_totals_one_over_all_targets():
    # summing over every possible collapse output must give probability 1
    rng = np.random.default_rng(3)
    frames, vocab = 3, 3
    probs = rng.dirichlet(np.ones(vocab), size=frames)
    total = 0.0
    targets = [[]]
    for a in range(1, vocab):
        targets.append([a])
        for b in range(1, vocab):
            targets.append([a, b])
            for c in range(1, vocab):
                targets.append([a, b, c])
    for target in targets:
        total += kernels.ctc_path_sum(probs, np.array(target, np.int64))
    assert total == pytest.approx(1.0, abs=1e-12)
