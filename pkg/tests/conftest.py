import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from vbarms.sparse import CsrMatrix

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA_DIRS = [os.environ.get("VBARMS_MATRIX_DIR"), Path(__file__).resolve().parents[1] / "data"]


def find_matrix(name: str):
    """SuiteSparse matrix ``name`` as ``NAME.mtx`` or ``NAME/NAME.mtx`` in a data dir, else None."""
    for d in DATA_DIRS:
        if not d:
            continue
        d = Path(d)
        for nm in dict.fromkeys((name, name.lower(), name.upper())):
            for cand in (d / f"{nm}.mtx", d / nm / f"{nm}.mtx", d / f"{nm}.npz"):
                if cand.is_file():
                    return cand
    return None


def require_matrix(name: str) -> Path:
    p = find_matrix(name)
    if p is None:
        pytest.skip(f"{name}.mtx not found (set VBARMS_MATRIX_DIR or put it under data/)")
    return p


@st.composite
def sparse_matrices(draw, min_n=1, max_n=30, square=True, density=None):
    n = draw(st.integers(min_n, max_n))
    m = n if square else draw(st.integers(min_n, max_n))
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    p = density if density is not None else draw(st.floats(0.05, 0.5))
    mask = rng.random((n, m)) < p
    vals = np.where(mask, rng.standard_normal((n, m)), 0.0)
    return CsrMatrix.from_dense(vals)


@st.composite
def partitions(draw, n):
    k = draw(st.integers(1, max(n, 1)))
    labels = draw(st.lists(st.integers(0, k - 1), min_size=n, max_size=n))
    return np.array(labels, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
