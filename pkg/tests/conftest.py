from __future__ import annotations

import pytest

from gpureuse.core_model import GpuSpec, ModelSpec, TensorSpec


def make_model(model_id: str, sizes, bytes_per_token: int = 0, **kw) -> ModelSpec:
    """Model whose tensors ``t00, t01, ...`` have the given byte sizes."""
    tensors = tuple(TensorSpec.create(model_id, f"t{i:02d}", (s,), "u8") for i, s in enumerate(sizes))
    return ModelSpec(model_id, tensors, bytes_per_token=bytes_per_token, **kw)


def make_gpu(pool_size: int, gpu_id: str = "gpu0", **kw) -> GpuSpec:
    return GpuSpec(gpu_id, pool_size, **kw)


@pytest.fixture
def small_gpu():
    return make_gpu(100, pcie_bandwidth=10.0, intra_copy_bandwidth=100.0, store_bandwidth=5.0)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
