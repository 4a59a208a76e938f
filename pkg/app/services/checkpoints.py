"""Binary checkpoints.

Layout, all little-endian: an int64 header (N, M, d), the user table then the
item table as row-major float64. An optional exposure section follows with
its own int64 header (N, d), then e_u, the gate weight and the gate bias.
"""
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger

from app.exceptions import CheckpointError
from app.services.exposure import ExposureParams
from app.services.model import DTYPE, FactorModel

_INT = np.dtype("<i8")
_FLOAT = np.dtype("<f8")


def _table(tensor: torch.Tensor) -> bytes:
    return np.ascontiguousarray(tensor.detach().numpy(), dtype=_FLOAT).tobytes()


def save_checkpoint(path: Union[str, Path], model: FactorModel,
                    exposure: Optional[ExposureParams] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [
        np.array([model.n_users, model.n_items, model.dim], dtype=_INT).tobytes(),
        _table(model.user_emb),
        _table(model.item_emb),
    ]
    if exposure is not None:
        chunks += [
            np.array(list(exposure.user_exp_emb.shape), dtype=_INT).tobytes(),
            _table(exposure.user_exp_emb),
            _table(exposure.gate_weight),
            _table(exposure.gate_bias.reshape(1)),
        ]
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Checkpoint written to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.payload)

    def read(self, dtype: np.dtype, count: int) -> np.ndarray:
        size = dtype.itemsize * count
        if self.offset + size > len(self.payload):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        values = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return values.astype(dtype.newbyteorder("="))


def _tensor(values: np.ndarray, shape) -> torch.Tensor:
    return torch.tensor(values.reshape(shape), dtype=DTYPE, requires_grad=True)


def load_checkpoint(path: Union[str, Path]) -> Tuple[FactorModel, Optional[ExposureParams]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)

    n_users, n_items, dim = (int(v) for v in reader.read(_INT, 3))
    if min(n_users, n_items) < 0 or dim < 1:
        raise CheckpointError(f"{path}: invalid header ({n_users}, {n_items}, {dim})")
    model = FactorModel(
        _tensor(reader.read(_FLOAT, n_users * dim), (n_users, dim)),
        _tensor(reader.read(_FLOAT, n_items * dim), (n_items, dim)),
    )

    exposure = None
    if not reader.exhausted:
        exp_users, exp_dim = (int(v) for v in reader.read(_INT, 2))
        if (exp_users, exp_dim) != (n_users, dim):
            raise CheckpointError(f"{path}: exposure section shape ({exp_users}, {exp_dim}) does not match model")
        exposure = ExposureParams(
            user_exp_emb=_tensor(reader.read(_FLOAT, n_users * dim), (n_users, dim)),
            gate_weight=_tensor(reader.read(_FLOAT, dim), (dim,)),
            gate_bias=_tensor(reader.read(_FLOAT, 1), ()),
        )
    if not reader.exhausted:
        raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return model, exposure
