import os

# Pin BLAS pools before numpy loads anywhere: bitwise determinism and, on the
# small matrices used here, better throughput than threaded BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest

from structok.corpus import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_synth():
    """A small planted-structure corpus shared by fast tests."""
    cfg = SynthConfig(n_patients=120, n_codes=100, n_conditions=8, seed=11)
    corpus, truth = generate_synthetic(cfg)
    return cfg, corpus, truth
