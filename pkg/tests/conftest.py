"""Shared pytest configuration: every test runs in double precision and leaves torch settings as it found them."""

import pytest
import torch


@pytest.fixture(autouse=True)
def _torch_settings():
    dtype = torch.get_default_dtype()
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(dtype)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)
