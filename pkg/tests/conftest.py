import os


def _pick_blas_kernel():
    # Some VMs mask CPUID so OpenBLAS auto-detection falls back to a slow
    # generic kernel even when AVX-512 is available. Pin the kernel before
    # numpy (and therefore OpenBLAS) initializes; respect an explicit choice.
    if "OPENBLAS_CORETYPE" in os.environ:
        return
    try:
        with open("/proc/cpuinfo") as fh:
            flags = fh.read()
    except OSError:
        return
    needed = ("avx512f", "avx512dq", "avx512bw", "avx512vl")
    if all(f in flags for f in needed):
        os.environ["OPENBLAS_CORETYPE"] = "SKYLAKEX"


_pick_blas_kernel()

import numpy as np
import pytest

from voxvid.backbone import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        layers=2,
        hidden=32,
        heads=2,
        patch=2,
        frames=4,
        latent=(4, 4, 2),
        audio_tokens=4,
        audio_feature_dim=16,
        audio_hidden=16,
    )
    base.update(overrides)
    return ModelConfig(**base)
