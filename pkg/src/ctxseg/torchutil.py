from __future__ import annotations

import hashlib

import numpy as np
import torch


def to_tensor(images) -> torch.Tensor:
    """(n, H, W) or (H, W) array -> (n, 1, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr.copy()).unsqueeze(1)


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def batches(n: int, batch_size: int, gen: torch.Generator):
    """Yield index tensors of one shuffled epoch."""
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.is_floating_point():
        return t.to(torch.float32).numpy().astype("<f4").tobytes()
    return t.to(torch.int64).numpy().astype("<i8").tobytes()


def state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(tensor_bytes(state[name]))
    return h.hexdigest()
