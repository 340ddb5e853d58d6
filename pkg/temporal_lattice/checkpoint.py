"""
Checkpoint container: a directory with ``manifest.json``, ``params.bin`` and
optionally ``optimizer.bin``.

The binary files are plain concatenations of little-endian float32 arrays
(the value layout of lattice snapshots); the manifest records the name,
shape and element offset of every array, the fusion spec and the model and
sequence configuration needed to rebuild the network.
"""

import json
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from loguru import logger

from .datatypes import CheckpointManifest, ParameterEntry
from .errors import DataFormatError
from .model import TemporalLatticeNet
from .optim import Adam, OptimState
from .snapshot import VALUE_DTYPE
from .version import VERSION

MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"
OPTIMIZER_NAME = "optimizer.bin"

PathLike = Union[str, Path]


def pack_arrays(arrays: Mapping[str, np.ndarray]) -> Tuple[bytes, List[ParameterEntry]]:
    entries = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        entries.append(ParameterEntry(name=name, shape=list(array.shape), offset=offset))
        chunks.append(array.astype(VALUE_DTYPE).tobytes())
        offset += array.size
    return b"".join(chunks), entries


def unpack_arrays(payload: bytes, entries: List[ParameterEntry], path: Optional[str] = None) -> Dict[str, np.ndarray]:
    """
    Raises:
        DataFormatError: If an entry points past the end of the payload.
    """
    flat = np.frombuffer(payload, dtype=VALUE_DTYPE)
    arrays = {}
    for entry in entries:
        size = int(np.prod(entry.shape, dtype=np.int64))
        end = entry.offset + size
        if entry.offset < 0 or end > flat.size:
            raise DataFormatError(
                f"Array '{entry.name}' spans elements {entry.offset}..{end} of a {flat.size}-element blob",
                path=path,
                offset=entry.offset * VALUE_DTYPE.itemsize,
            )
        arrays[entry.name] = flat[entry.offset:end].reshape(entry.shape).copy()
    return arrays


def optimizer_arrays(state: OptimState) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, moment in state.first_moment.items():
        arrays[f"m/{name}"] = moment
    for name, moment in state.second_moment.items():
        arrays[f"v/{name}"] = moment
    return arrays


def restore_optimizer(state: OptimState, arrays: Mapping[str, np.ndarray], scalars: Mapping[str, float]) -> None:
    state.first_moment = {key[2:]: value for key, value in arrays.items() if key.startswith("m/")}
    state.second_moment = {key[2:]: value for key, value in arrays.items() if key.startswith("v/")}
    state.load_scalars(scalars)


def save_checkpoint(
    directory: PathLike,
    model: TemporalLatticeNet,
    optimizer: Optional[Adam] = None,
    epoch: int = 0,
    step: int = 0,
) -> Path:
    """Write model parameters (and optimizer state when given) to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload, entries = pack_arrays({name: p.data for name, p in model.parameters().items()})
    (directory / PARAMS_NAME).write_bytes(payload)

    manifest = CheckpointManifest(
        package_version=VERSION,
        fusion=str(model.spec),
        model=model.config,
        sequence=model.sequence,
        epoch=epoch,
        step=step,
        parameters=entries,
    )
    if optimizer is not None:
        moments, moment_entries = pack_arrays(optimizer_arrays(optimizer.state))
        (directory / OPTIMIZER_NAME).write_bytes(moments)
        manifest.optimizer_scalars = optimizer.state.scalars()
        manifest.optimizer_moments = moment_entries
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote checkpoint ({len(entries)} parameter arrays, epoch {epoch}) to {directory}")
    return directory


def read_manifest(directory: PathLike) -> CheckpointManifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DataFormatError(f"No checkpoint manifest in {directory}", path=str(path))
    try:
        return CheckpointManifest.model_validate(json.loads(path.read_text()))
    except (json.JSONDecodeError, ValueError) as e:
        raise DataFormatError(f"Invalid checkpoint manifest: {e}", path=str(path)) from e


def load_checkpoint(directory: PathLike, optimizer: Optional[Adam] = None) -> Tuple[TemporalLatticeNet, CheckpointManifest]:
    """
    Rebuild the network stored in ``directory``.

    When ``optimizer`` is given it must have been built over the returned
    model's parameters; use ``load_optimizer_state`` after constructing it.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    model = TemporalLatticeNet(manifest.model, manifest.sequence)
    params_path = directory / PARAMS_NAME
    model.load_parameters(unpack_arrays(params_path.read_bytes(), manifest.parameters, path=str(params_path)))
    if optimizer is not None:
        load_optimizer_state(directory, optimizer)
    logger.debug(f"Loaded checkpoint {directory} (fusion {manifest.fusion}, epoch {manifest.epoch})")
    return model, manifest


def load_optimizer_state(directory: PathLike, optimizer: Adam) -> None:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.optimizer_scalars is None:
        raise DataFormatError(f"Checkpoint {directory} holds no optimizer state", path=str(directory / MANIFEST_NAME))
    path = directory / OPTIMIZER_NAME
    arrays = unpack_arrays(path.read_bytes(), manifest.optimizer_moments, path=str(path))
    restore_optimizer(optimizer.state, arrays, manifest.optimizer_scalars)
