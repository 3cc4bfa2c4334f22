from __future__ import annotations

import hashlib
import time
from types import TracebackType
from typing import Mapping

import numpy as np
import torch


class StopWatch:
    """
    Context manager for timing a block
    """

    def __enter__(self) -> StopWatch:
        self.start_time = time.time()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_value: BaseException | None,
        exc_traceback: TracebackType | None,
    ) -> None:
        self.end_time = time.time()
        self.total_time = self.end_time - self.start_time


def format_duration(total_seconds: int) -> str:
    hours = total_seconds // 3600
    minutes = (total_seconds % 3600) // 60
    seconds = total_seconds % 60

    out = []
    if hours > 0:
        out.extend([str(hours), "h"])
    if hours or minutes:
        out.extend([str(minutes), "m"])
    out.extend([str(seconds), "s"])
    return "".join(out)


def collapse_spaces(string: str) -> str:
    bits = string.replace("\n", " ").split(" ")
    return " ".join(filter(None, bits))


def derive_seed(seed: int, *keys: int) -> int:
    """
    Derive an independent 63-bit seed from a root seed and a path of integer
    keys, e.g. ``derive_seed(seed, sample_index)``. Stable across platforms.
    """
    sequence = np.random.SeedSequence([seed % 2**64, *keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_generator(seed: int, device: torch.device | str = "cpu") -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(seed % 2**63)
    return generator


def tensor_checksum(tensors: Mapping[str, torch.Tensor]) -> str:
    """
    SHA-256 over tensor names, dtypes, shapes and raw bytes, in name order.
    """
    digest = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(dict(module.state_dict()))
