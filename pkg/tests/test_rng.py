import numpy as np
import pytest

from dpcert.rng import derive_seed, generator


def test_same_labels_same_stream():
    a = generator(7, "noise", 3).standard_normal(5)
    b = generator(7, "noise", 3).standard_normal(5)
    assert np.array_equal(a, b)


def test_labels_and_seeds_separate_streams():
    base = generator(7, "noise").standard_normal(5)
    assert not np.array_equal(base, generator(7, "shuffle").standard_normal(5))
    assert not np.array_equal(base, generator(8, "noise").standard_normal(5))


def test_derive_seed_is_stable_63_bit():
    s = derive_seed(0, "init")
    assert s == derive_seed(0, "init")
    assert 0 <= s < 2**63
    with pytest.raises(ValueError):
        derive_seed(-1)
