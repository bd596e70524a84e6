from __future__ import annotations

import numpy as np
import pytest

from clipchain.seeding import stream


def test_same_tags_same_stream() -> None:
    a = stream(7, "init", 0).standard_normal(16)
    b = stream(7, "init", 0).standard_normal(16)
    assert np.array_equal(a, b)


def test_different_tags_different_streams() -> None:
    a = stream(7, "init", 0).standard_normal(16)
    b = stream(7, "init", 1).standard_normal(16)
    c = stream(7, "pns", 0).standard_normal(16)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_seed_changes_stream() -> None:
    a = stream(7, "init").standard_normal(16)
    b = stream(8, "init").standard_normal(16)
    assert not np.array_equal(a, b)


def test_string_tags_are_not_positional() -> None:
    # "ab" + "c" must not collide with "a" + "bc"
    a = stream(0, "ab", "c").standard_normal(8)
    b = stream(0, "a", "bc").standard_normal(8)
    assert not np.array_equal(a, b)


def test_negative_int_tag_rejected() -> None:
    with pytest.raises(ValueError):
        stream(0, -1)
