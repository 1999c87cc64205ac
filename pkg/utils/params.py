# acrkn/utils/params.py

import json
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from domain.errors import CheckpointError, NumericsError
from utils.tensor import Parameter

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "acrkn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]
    values: List[float]


class CheckpointFile(BaseModel):
    format: Literal["acrkn-checkpoint"]
    version: int
    params: List[CheckpointEntry]


class ParamStore:
    """
    Named parameters in insertion order. Names are unique.
    """

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, mask: Optional[np.ndarray] = None) -> Parameter:
        if name in self._params:
            raise NumericsError(f"Duplicate parameter name: {name}")
        param = Parameter(value, name=name, mask=mask)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def group(self, prefix: str) -> List[Parameter]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def size(self) -> int:
        return int(sum(p.value.size for p in self))

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            param = self._params.get(name)
            if param is None:
                raise CheckpointError(f"Unknown parameter in snapshot: {name}")
            if param.value.shape != value.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {value.shape}, model {param.value.shape}"
                )
            param.value[...] = value

    # ---------- checkpoint file ----------

    def save(self, path: str | Path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": [
                {"name": name, "shape": list(p.value.shape), "values": p.value.ravel().tolist()}
                for name, p in self._params.items()
            ],
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")
        logger.info("Saved %d parameters to %s", len(self._params), path)

    def load(self, path: str | Path) -> None:
        """Load values into the existing parameters; names and shapes must match."""
        values = read_checkpoint(path)
        missing = [name for name in self._params if name not in values]
        if missing:
            raise CheckpointError(f"Checkpoint {path} is missing parameters: {missing}")
        self.restore(values)
        logger.info("Loaded %d parameters from %s", len(self._params), path)


def read_checkpoint(path: str | Path) -> Dict[str, np.ndarray]:
    try:
        parsed = CheckpointFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    if parsed.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {parsed.version} (expected {CHECKPOINT_VERSION})")

    values: Dict[str, np.ndarray] = {}
    for entry in parsed.params:
        expected = int(np.prod(entry.shape)) if entry.shape else 1
        if len(entry.values) != expected:
            raise CheckpointError(f"Entry {entry.name}: {len(entry.values)} values for shape {entry.shape}")
        values[entry.name] = np.asarray(entry.values, dtype=np.float64).reshape(entry.shape)
    return values
