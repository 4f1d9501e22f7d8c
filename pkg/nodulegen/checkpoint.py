"""
Checkpoint format.

A checkpoint is a directory:

    meta.json      step/epoch, config hash, optimizer hyperparameters, ...
    tensors.bin    named tensor table

tensors.bin layout (little-endian):

    magic      4 bytes  b"TSGN"
    version    u32
    count      u32
    count x:
        name_len  u32, name utf-8
        dtype     u8   (see _DTYPE_CODES)
        ndim      u32
        dims      ndim x u64
        data      row-major
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .config import PipelineConfig
from .errors import FormatError, IoError

logger = logging.getLogger(__name__)

TENSORS_NAME = "tensors.bin"
META_NAME = "meta.json"

_DTYPE_CODES = {
    torch.float32: (0, '<f4'),
    torch.float64: (1, '<f8'),
    torch.int64: (2, '<i8'),
    torch.uint8: (3, 'u1'),
    torch.int32: (4, '<i4'),
    torch.bool: (5, '?'),
}
_CODE_DTYPES = {code: (dtype, np_dtype) for dtype, (code, np_dtype) in _DTYPE_CODES.items()}


def _write_table(path: Path, tensors: Mapping[str, torch.Tensor]):
    with open(path, 'wb') as f:
        f.write(PipelineConfig.CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', PipelineConfig.CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            tensor = tensors[name].detach().cpu()
            if tensor.dtype not in _DTYPE_CODES:
                raise FormatError(f"Cannot store tensor {name} with dtype {tensor.dtype}")
            code, np_dtype = _DTYPE_CODES[tensor.dtype]
            encoded = name.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<BI', code, tensor.dim()))
            f.write(struct.pack(f'<{tensor.dim()}Q', *tensor.shape))
            f.write(np.ascontiguousarray(tensor.numpy(), dtype=np_dtype).tobytes())


def _read_exact(f, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"Truncated tensor table while reading {what}")
    return data


def _read_table(path: Path) -> Dict[str, torch.Tensor]:
    tensors = {}
    with open(path, 'rb') as f:
        magic = f.read(4)
        if magic != PipelineConfig.CHECKPOINT_MAGIC:
            raise FormatError(f"{path} is not a tensor table (magic {magic!r})")
        version, count = struct.unpack('<II', _read_exact(f, 8, "header"))
        if version != PipelineConfig.CHECKPOINT_VERSION:
            raise FormatError(f"Unsupported tensor table version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack('<I', _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode('utf-8')
            code, ndim = struct.unpack('<BI', _read_exact(f, 5, f"{name} header"))
            if code not in _CODE_DTYPES:
                raise FormatError(f"Unknown dtype code {code} for tensor {name}")
            dtype, np_dtype = _CODE_DTYPES[code]
            dims = struct.unpack(f'<{ndim}Q', _read_exact(f, 8 * ndim, f"{name} dims"))
            itemsize = np.dtype(np_dtype).itemsize
            size = int(np.prod(dims, dtype=np.int64)) * itemsize
            data = np.frombuffer(_read_exact(f, size, name), dtype=np_dtype).reshape(dims)
            tensors[name] = torch.from_numpy(data.copy()).to(dtype)
        if f.read(1):
            raise FormatError(f"Trailing bytes after {count} tensors in {path}")
    return tensors


def save_tensors(path: Path, tensors: Mapping[str, torch.Tensor], meta: Optional[Dict[str, Any]] = None) -> Path:
    """Write a tensor table plus metadata into a checkpoint directory."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        _write_table(path / TENSORS_NAME, tensors)
        meta = dict(meta or {})
        meta['format_version'] = PipelineConfig.CHECKPOINT_VERSION
        meta['tensor_count'] = len(tensors)
        with open(path / META_NAME, 'w') as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise IoError(f"Cannot write checkpoint {path}: {e}", path=path)
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")
    return path


def load_tensors(path: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """
    Read a checkpoint directory.

    Raises:
        IoError: the directory or its files are missing
        FormatError: the files are corrupt or inconsistent
    """
    path = Path(path)
    if not (path / TENSORS_NAME).is_file() or not (path / META_NAME).is_file():
        raise IoError(f"Not a checkpoint directory: {path}", path=path)
    try:
        with open(path / META_NAME) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"Corrupt checkpoint metadata in {path}: {e}")
    except OSError as e:
        raise IoError(f"Cannot read checkpoint {path}: {e}", path=path)
    try:
        tensors = _read_table(path / TENSORS_NAME)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"Corrupt tensor table in {path}: {e}")
    if meta.get('tensor_count') != len(tensors):
        raise FormatError(
            f"Checkpoint {path} lists {meta.get('tensor_count')} tensors but holds {len(tensors)}")
    return tensors, meta


@dataclass
class Checkpoint:
    """Named tensors plus JSON metadata, with helpers to restore training objects."""
    tensors: Dict[str, torch.Tensor] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def add_module(self, name: str, module: nn.Module):
        for key, value in module.state_dict().items():
            self.tensors[f"{name}/{key}"] = value

    def add_optimizer(self, name: str, optimizer: torch.optim.Optimizer):
        state = optimizer.state_dict()
        scalars = {}
        for index, entries in state['state'].items():
            for key, value in entries.items():
                if isinstance(value, torch.Tensor):
                    self.tensors[f"{name}/state/{index}/{key}"] = value
                else:
                    scalars[f"{index}/{key}"] = value
        self.meta.setdefault('optimizers', {})[name] = {
            'param_groups': state['param_groups'],
            'scalars': scalars,
        }

    def add_generator(self, name: str, generator: torch.Generator):
        self.tensors[f"{name}/rng_state"] = generator.get_state()

    def restore_module(self, name: str, module: nn.Module):
        prefix = f"{name}/"
        state = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(state)
        except RuntimeError as e:
            raise FormatError(f"Checkpoint entry {name} does not fit the model: {e}")

    def restore_optimizer(self, name: str, optimizer: torch.optim.Optimizer):
        info = self.meta.get('optimizers', {}).get(name)
        if info is None:
            raise FormatError(f"Checkpoint has no optimizer state {name}")
        state: Dict[int, Dict[str, Any]] = {}
        prefix = f"{name}/state/"
        for key, value in self.tensors.items():
            if key.startswith(prefix):
                index, entry = key[len(prefix):].split('/', 1)
                state.setdefault(int(index), {})[entry] = value
        for key, value in info['scalars'].items():
            index, entry = key.split('/', 1)
            state.setdefault(int(index), {})[entry] = value
        optimizer.load_state_dict({'state': state, 'param_groups': info['param_groups']})

    def restore_generator(self, name: str, generator: torch.Generator):
        key = f"{name}/rng_state"
        if key not in self.tensors:
            raise FormatError(f"Checkpoint has no rng state {name}")
        generator.set_state(self.tensors[key])

    def save(self, path: Path) -> Path:
        return save_tensors(path, self.tensors, self.meta)

    @classmethod
    def load(cls, path: Path) -> 'Checkpoint':
        tensors, meta = load_tensors(path)
        return cls(tensors=tensors, meta=meta)


def latest_checkpoint(root: Path, name: str) -> Optional[Path]:
    """Newest checkpoint directory for a model under root/checkpoints, if any."""
    directory = Path(root) / PipelineConfig.CHECKPOINT_DIR
    if not directory.is_dir():
        return None
    candidates = sorted(p for p in directory.glob(f"{name}_*") if (p / META_NAME).is_file())
    return candidates[-1] if candidates else None
