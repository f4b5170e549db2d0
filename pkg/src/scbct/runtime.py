"""Process-wide numeric settings (precision, threads, determinism)."""
from __future__ import annotations

import os

import torch


def deterministic_mode() -> bool:
    return os.environ.get("SCBCT_DETERMINISTIC", "") == "1"


def model_dtype() -> torch.dtype:
    return torch.float64 if deterministic_mode() else torch.float32


def configure(threads: int | None = None) -> None:
    if threads:
        torch.set_num_threads(int(threads))
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
