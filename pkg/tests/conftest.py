import os
from pathlib import Path

for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).resolve().parent.parent


def random_simplex(rng, n):
    return rng.dirichlet(np.ones(n))


def random_encoding(rng, n, k):
    return rng.dirichlet(np.ones(k), size=n)


def mutag_root():
    """Directory holding MUTAG_*.txt, or None when the corpus is absent."""
    candidates = []
    if os.environ.get("ASOT_DATA_ROOT"):
        candidates.append(Path(os.environ["ASOT_DATA_ROOT"]))
    candidates.append(REPO / "data")
    for base in candidates:
        for d in (base / "MUTAG", base):
            if (d / "MUTAG_graph_indicator.txt").exists():
                return d
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_root():
    return FIXTURES / "TOY"
