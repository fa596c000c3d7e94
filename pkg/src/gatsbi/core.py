"""Domain types, the seedable random source and the GTSR tensor container."""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch

LOG_STD_MIN = -10.0
LOG_STD_MAX = 3.0

GTSR_MAGIC = b"GTSR"
GTSR_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1

PathLike = Union[str, os.PathLike]


class ContainerFormatError(ValueError):
    """Bad magic, unsupported version or malformed header."""


class ContainerLengthError(ContainerFormatError):
    """The payload is shorter than the header promises."""


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianLatent:
    """Diagonal Gaussian parameterised by mean and log standard deviation.

    ``log_std`` is clamped to ``[LOG_STD_MIN, LOG_STD_MAX]`` on construction
    through :meth:`from_raw`; direct construction trusts the caller.
    """

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_std shape {tuple(self.log_std.shape)}"
            )

    @classmethod
    def from_raw(cls, mean: torch.Tensor, raw_log_std: torch.Tensor) -> "GaussianLatent":
        return cls(mean, raw_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX))

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "GaussianLatent":
        return GaussianLatent(self.mean.detach(), self.log_std.detach())


@dataclass(frozen=True)
class RecurrentState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ValueError("hidden and cell must have equal shapes")

    @classmethod
    def zeros(cls, *shape: int, dtype=torch.float32, device=None) -> "RecurrentState":
        z = torch.zeros(*shape, dtype=dtype, device=device)
        return cls(z, z.clone())

    def as_tuple(self):
        return self.hidden, self.cell


@dataclass
class Episode:
    """Frames ``[T, 3, H, W]`` in ``[0, 1]`` with per-step actions ``[T, A]``.

    ``extras`` carries generator annotations (object centres, radii,
    collision steps) when present.
    """

    frames: torch.Tensor
    actions: torch.Tensor
    id: str = ""
    extras: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be [T, 3, H, W], got {tuple(self.frames.shape)}")
        if self.actions.dim() != 2:
            raise ValueError(f"actions must be [T, A], got {tuple(self.actions.shape)}")
        if self.frames.shape[0] != self.actions.shape[0]:
            raise ValueError(
                f"episode {self.id!r}: {self.frames.shape[0]} frames but {self.actions.shape[0]} actions"
            )
        if self.frames.shape[0] < 2:
            raise ValueError(f"episode {self.id!r} must have at least 2 steps")
        if not torch.isfinite(self.frames).all() or not torch.isfinite(self.actions).all():
            raise ValueError(f"episode {self.id!r} contains non-finite values")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def to_tensors(self) -> Dict[str, torch.Tensor]:
        out = {"frames": self.frames, "actions": self.actions}
        out.update(self.extras)
        return out

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, torch.Tensor], id: str = "") -> "Episode":
        extras = {k: v for k, v in tensors.items() if k not in ("frames", "actions")}
        return cls(tensors["frames"], tensors["actions"], id=id, extras=extras)


# ---------------------------------------------------------------------------
# Random source
# ---------------------------------------------------------------------------

class RandomSource:
    """A single-owner stream of random draws backed by a ``torch.Generator``.

    All stochastic model computations take one of these; fixing the seed fixes
    every sample.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def normal(self, shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
        out = torch.randn(tuple(shape), generator=self.generator, dtype=dtype)
        return out.to(device) if device is not None else out

    def uniform(self, shape: Sequence[int], dtype=torch.float32, device=None) -> torch.Tensor:
        out = torch.rand(tuple(shape), generator=self.generator, dtype=dtype)
        return out.to(device) if device is not None else out

    def integers(self, high: int, shape: Sequence[int]) -> torch.Tensor:
        return torch.randint(high, tuple(shape), generator=self.generator)

    def numpy(self) -> np.random.Generator:
        """A numpy generator seeded from the next draw of this stream."""
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.generator))
        return np.random.default_rng(seed)


def seeded_rng(seed: int) -> RandomSource:
    return RandomSource(seed)


def derive_seed(*parts: Union[int, str]) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints/strings."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


# ---------------------------------------------------------------------------
# GTSR container
# ---------------------------------------------------------------------------

def _as_array(name: str, value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu()
        arr = value.numpy() if value.dtype == torch.uint8 else value.to(torch.float32).numpy()
    else:
        arr = np.asarray(value)
        if arr.dtype != np.uint8:
            arr = arr.astype(np.float32)
    if arr.dtype != np.uint8 and not np.all(np.isfinite(arr)):
        raise ValueError(f"tensor {name!r} contains non-finite values")
    return arr


def encode_container(named_tensors: Mapping[str, object]) -> bytes:
    if not named_tensors:
        raise ValueError("container needs at least one tensor")
    if len(named_tensors) > 0xFFFF:
        raise ValueError("too many entries for a GTSR container")
    parts: List[bytes] = [GTSR_MAGIC, struct.pack("<HH", GTSR_VERSION, len(named_tensors))]
    for name, value in named_tensors.items():
        if not name or not name.isascii():
            raise ValueError(f"tensor names must be nonempty ASCII, got {name!r}")
        arr = _as_array(name, value)
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        raw_name = name.encode("ascii")
        dtype = DTYPE_U8 if arr.dtype == np.uint8 else DTYPE_F32
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", dtype))
        if dtype == DTYPE_F32:
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        else:
            parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def save_tensor_container(path: PathLike, named_tensors: Mapping[str, object]) -> None:
    """Write ``named_tensors`` to ``path`` in GTSR format (float32 little-endian)."""
    payload = encode_container(named_tensors)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write tensor container {path}: {exc}") from exc


def decode_container(data: bytes, source: str = "<bytes>") -> Dict[str, torch.Tensor]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerLengthError(
                f"{source}: truncated at byte {pos}, needed {n} more, have {len(view) - pos}"
            )
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != GTSR_MAGIC:
        raise ContainerFormatError(f"{source}: bad magic, not a GTSR container")
    version, count = struct.unpack("<HH", take(4))
    if version != GTSR_VERSION:
        raise ContainerFormatError(f"{source}: unsupported GTSR version {version}")
    out: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("ascii")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        (dtype,) = struct.unpack("<B", take(1))
        n = int(np.prod(dims)) if dims else 1
        if dtype == DTYPE_F32:
            arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        elif dtype == DTYPE_U8:
            arr = np.frombuffer(take(n), dtype=np.uint8).copy().reshape(dims)
        else:
            raise ContainerFormatError(f"{source}: entry {name!r} has unknown dtype code {dtype}")
        out[name] = torch.from_numpy(arr)
    if pos != len(view):
        raise ContainerFormatError(f"{source}: {len(view) - pos} trailing bytes after last entry")
    return out


def load_tensor_container(path: PathLike) -> Dict[str, torch.Tensor]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor container {path}: {exc}") from exc
    return decode_container(data, source=str(path))


def bytes_tensor(text: Union[str, bytes]) -> torch.Tensor:
    """Pack text (e.g. JSON metadata) as a uint8 tensor for a container entry."""
    raw = text.encode() if isinstance(text, str) else text
    return torch.tensor(list(raw), dtype=torch.uint8)


def tensor_bytes(t: torch.Tensor) -> bytes:
    return bytes(t.to(torch.uint8).tolist())


def clamp_frames(frames: torch.Tensor) -> torch.Tensor:
    return frames.clamp(0.0, 1.0)


def check_finite(name: str, values: Iterable[torch.Tensor]) -> None:
    for v in values:
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"{name}: non-finite values")


def to_device(tensors: Mapping[str, torch.Tensor], device: Optional[torch.device]):
    return {k: v.to(device) for k, v in tensors.items()}
