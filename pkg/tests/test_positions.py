import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bapa_lab.errors import ConfigError, SchemeError
from bapa_lab.positions import ModalityLayout, assign_bapa, assign_sequential, scheme_for

layouts = st.builds(ModalityLayout, st.integers(0, 40), st.integers(1, 200), st.integers(1, 40))


@pytest.mark.parametrize(
    "i,j,k,expected",
    [
        (3, 4, 2, list(range(9))),
        (0, 1, 1, [0, 1]),
        (2, 9, 3, list(range(14))),
    ],
)
def test_sequential(i, j, k, expected):
    assert assign_sequential(ModalityLayout(i, j, k)).tolist() == expected


@pytest.mark.parametrize(
    "i,j,k,expected",
    [
        (3, 4, 2, [0, 1, 2, 3, 3, 3, 3, 4, 5]),
        (0, 5, 1, [0, 0, 0, 0, 0, 1]),
        (1, 1, 1, [0, 1, 2]),
    ],
)
def test_bapa(i, j, k, expected):
    assert assign_bapa(ModalityLayout(i, j, k)).tolist() == expected


def test_single_image_token_schemes_coincide():
    lay = ModalityLayout(4, 1, 3)
    np.testing.assert_array_equal(assign_bapa(lay), assign_sequential(lay))


def test_registry():
    assert scheme_for("bapa") is assign_bapa
    assert scheme_for("sequential") is assign_sequential
    with pytest.raises(SchemeError):
        scheme_for("mrope")


@pytest.mark.parametrize("args", [(-1, 2, 1), (0, 0, 1), (0, 1, 0)])
def test_invalid_layouts(args):
    with pytest.raises(ConfigError):
        ModalityLayout(*args)


def test_multi_image_rejected():
    with pytest.raises(ConfigError):
        ModalityLayout(1, 4, 2, num_images=2)


@given(layouts)
def test_bapa_properties(lay):
    i, j, k = lay.system_len, lay.image_len, lay.user_len
    b = assign_bapa(lay)
    s = assign_sequential(lay)
    assert b.shape == s.shape == (i + j + k,)
    assert np.all(b[lay.image_slice] == i)
    assert b[lay.user_slice][0] == i + 1
    assert b[-1] == i + k
    assert s[-1] == i + j + k - 1
    # text-to-image distances shrink by exactly j - 1 at the last token
    assert s[-1] - b[-1] == j - 1
    np.testing.assert_array_equal(b[:i], s[:i])
    np.testing.assert_array_equal(b[:i], np.arange(i))
    assert np.all(np.diff(b) >= 0)
    assert np.all(np.diff(b[lay.user_slice]) == 1)
