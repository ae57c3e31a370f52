import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pelab import rng


def test_keys_differ_by_label_and_seed():
    keys = {rng.derive_key(s, lab) for s in range(5) for lab in ("data", "add_noise", "solver", "codec")}
    assert len(keys) == 20


def test_key_is_pure():
    assert rng.derive_key(7, "standard", 3) == rng.derive_key(7, "standard", 3)
    assert rng.derive_key(7, "standard", 3) != rng.derive_key(7, 3, "standard")


@settings(max_examples=50, deadline=None)
@given(offset=st.integers(0, 20_000), n=st.integers(1, 9000), step=st.integers(0, 600))
def test_slices_match_full_batch(offset, n, step):
    full = rng.stream(11, "solver", offset + n).normal(step, 2)
    part = rng.stream(11, "solver", n, offset).normal(step, 2)
    assert np.array_equal(full[offset:], part)


def test_uniform_range_and_moments():
    u = rng.stream(1, "codec", 400_000).uniform(0, 1)
    assert u.min() > 0.0 and u.max() <= 1.0
    assert abs(u.mean() - 0.5) < 2e-3


def test_normal_moments_and_step_independence():
    s = rng.stream(2, "add_noise", 400_000)
    a, b = s.normal(0, 1), s.normal(1, 1)
    assert abs(a.mean()) < 5e-3 and abs(a.var() - 1) < 1e-2
    assert abs(np.corrcoef(a[:, 0], b[:, 0])[0, 1]) < 5e-3
