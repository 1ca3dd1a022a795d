"""Parameter containers, basic layers and the checkpoint archive."""

from __future__ import annotations

import contextlib
import json
import struct
import zlib
from pathlib import Path
from typing import Iterator

import numpy as np

from gsrformer import tensor as T
from gsrformer.tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.array(data), requires_grad=requires_grad)


class Module:
    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, item in enumerate(value):
                    yield f"{name}{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    @contextlib.contextmanager
    def evaluating(self):
        """Eval mode inside the block; every submodule's own mode is restored after."""
        modes = [(m, m.training) for _, m in self.named_modules()]
        self.eval()
        try:
            yield self
        finally:
            for m, mode in modes:
                m.training = mode

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        self.weight = Parameter(xavier(rng, in_dim, out_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, count: int, dim: int):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(count, dim)))

    def forward(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)


class DropoutContext:
    """Counter-based dropout masks keyed by (seed, layer id, step, call index).

    Two runs that set the same steps draw identical masks regardless of what
    else consumed randomness in between.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.step = 0
        self._calls: dict[str, int] = {}

    def set_step(self, step: int) -> None:
        self.step = int(step)
        self._calls.clear()

    def keep_mask(self, layer_id: str, shape: tuple, rate: float, dtype) -> np.ndarray:
        call = self._calls.get(layer_id, 0)
        self._calls[layer_id] = call + 1
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(layer_id.encode())], dtype=np.uint64)
        counter = np.array([self.step, call, 0, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return ((gen.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


class Dropout(Module):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._ctx: DropoutContext | None = None
        self._layer_id = ""

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0 or self._ctx is None:
            return x
        return x * self._ctx.keep_mask(self._layer_id, x.shape, self.rate, x.dtype)


def bind_dropout(root: Module, ctx: DropoutContext) -> None:
    """Give every Dropout under ``root`` its dotted name and the shared context."""
    for name, m in root.named_modules():
        if isinstance(m, Dropout):
            m._ctx = ctx
            m._layer_id = name


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, dropout: float = 0.0):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(T.relu(self.fc1(x))))


class MLP(Module):
    """Affine layers with ReLU between them (none after the last)."""

    def __init__(self, rng, dims: list[int], dropout: float = 0.0):
        self.fc = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.fc):
            x = layer(x)
            if i < len(self.fc) - 1:
                x = self.drop(T.relu(x))
        return x


# checkpoint archive ---------------------------------------------------------------
#
#   magic    8 bytes  b"GSRCKPT\n"
#   version  u32
#   meta     u32 length + UTF-8 JSON (sorted keys)
#   count    u32
#   entries  u16 name length, name, u8 dtype (1 = f64, 2 = f32), u8 ndim,
#            u32 extents, raw little-endian values
# All integers little-endian.

CKPT_MAGIC = b"GSRCKPT\n"
CKPT_VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes,
           struct.pack("<I", len(params))]
    for name in params:
        arr = np.asarray(params[name])
        code = _CODES[arr.dtype]
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    try:
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack_from("<I", buf, 12)
        pos = 16
        meta = json.loads(buf[pos:pos + mlen].decode())
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += n * dt.itemsize
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params, meta
