import hashlib

import numpy as np
import pytest

from leafsim import Label, LeafMatrix, SampleMeta, Subset


def fake_sha(seed) -> str:
    """Deterministic 64-hex identity for synthetic samples."""
    return hashlib.sha256(str(seed).encode()).hexdigest()


def make_metas(n, subset=Subset.TRAIN, label=Label.MALICIOUS, prefix="s"):
    if subset == Subset.UNLABELED:
        label = Label.UNLABELED
    return [
        SampleMeta(row=i, sha256=fake_sha(f"{prefix}{i}"), label=label, subset=subset)
        for i in range(n)
    ]


def random_matrix(rng, n, t, high=32):
    return LeafMatrix(rng.integers(0, high, size=(n, t), dtype=np.uint32))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
