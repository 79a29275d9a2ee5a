"""Floating-point forward pass for LST models, plus the model file format.

A learned separable transform (LST) block applies one shared fully connected
layer to every row of a ``d_in x d_in`` input and a second shared layer to
every column of the result, giving a ``d_out x d_out`` output::

    V = tanh(X @ W1.T + b1)          # row transform, (d_in, d_out)
    Y = tanh(W2 @ V + b2[:, None])   # column transform, (d_out, d_out)

Parameters are kept as a list with one dict of arrays per stage:
``{"W1", "b1", "W2", "b2"}`` for LST and residual LST stages, ``{"W", "b"}``
for FC stages and ``{}`` for flatten.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    FormatVersionMismatch,
    ShapeMismatch,
    SpecInvalid,
)

TANH = "tanh"
NONE = "none"

IMAGE_SIZE = 28
NUM_CLASSES = 10


@dataclass(frozen=True)
class Lst:
    d_in: int
    d_out: int


@dataclass(frozen=True)
class ResLst:
    d: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Fc:
    d_in: int
    d_out: int
    activation: str = NONE


Stage = Union[Lst, ResLst, Flatten, Fc]


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stages: tuple


@dataclass
class FcLayer:
    W: np.ndarray  # (d_out, d_in)
    b: np.ndarray  # (d_out,)
    activation: str = NONE

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def param_count(self) -> int:
        return (self.d_in + 1) * self.d_out


@dataclass
class LstBlock:
    fc_row: FcLayer
    fc_col: FcLayer

    @classmethod
    def from_params(cls, p: dict) -> "LstBlock":
        return cls(FcLayer(p["W1"], p["b1"], TANH), FcLayer(p["W2"], p["b2"], TANH))

    @property
    def d_in(self) -> int:
        return self.fc_row.d_in

    @property
    def d_out(self) -> int:
        return self.fc_row.d_out

    def param_count(self) -> int:
        return 2 * (self.d_in + 1) * self.d_out


# Paper architectures ---------------------------------------------------------

def lst1() -> ModelSpec:
    return ModelSpec("lst1", (Lst(28, 28), Flatten(), Fc(784, 10)))


def lst2() -> ModelSpec:
    # hidden representation is 28x28: the only d_h matching the 11 098 total
    return ModelSpec("lst2", (Lst(28, 28), Lst(28, 28), Flatten(), Fc(784, 10)))


def reslst3() -> ModelSpec:
    return ModelSpec("reslst3", (ResLst(28), ResLst(28), ResLst(28), Flatten(), Fc(784, 10)))


def ffnn(widths) -> ModelSpec:
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise SpecInvalid("an FFNN needs at least input and output widths")
    stages = [Flatten()]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        stages.append(Fc(a, b, NONE if last else TANH))
    return ModelSpec("ffnn:" + "-".join(map(str, widths)), tuple(stages))


def spec_by_name(name: str) -> ModelSpec:
    """Resolve ``lst1``, ``lst2``, ``reslst3`` or ``ffnn:<w0>-<w1>-...``."""
    if name == "lst1":
        return lst1()
    if name == "lst2":
        return lst2()
    if name == "reslst3":
        return reslst3()
    if name.startswith("ffnn:"):
        try:
            widths = [int(w) for w in name[5:].split("-")]
        except ValueError:
            raise SpecInvalid(f"bad FFNN widths in {name!r}") from None
        return ffnn(widths)
    raise SpecInvalid(f"unknown model {name!r}")


# Shape bookkeeping ----------------------------------------------------------

def validate_spec(spec: ModelSpec, input_size: int = IMAGE_SIZE) -> None:
    """Check that stage dimensions chain and the model ends in a 10-way linear FC."""
    if not spec.stages:
        raise SpecInvalid("model has no stages")
    shape: tuple = (input_size, input_size)
    for i, st in enumerate(spec.stages):
        if isinstance(st, Lst):
            if shape != (st.d_in, st.d_in):
                raise SpecInvalid(f"stage {i}: Lst expects {st.d_in}x{st.d_in}, got {shape}")
            shape = (st.d_out, st.d_out)
        elif isinstance(st, ResLst):
            if shape != (st.d, st.d):
                raise SpecInvalid(f"stage {i}: ResLst expects {st.d}x{st.d}, got {shape}")
        elif isinstance(st, Flatten):
            if len(shape) != 2:
                raise SpecInvalid(f"stage {i}: Flatten needs a matrix input")
            shape = (shape[0] * shape[1],)
        elif isinstance(st, Fc):
            if shape != (st.d_in,):
                raise SpecInvalid(f"stage {i}: Fc expects vector of {st.d_in}, got {shape}")
            if st.activation not in (TANH, NONE):
                raise SpecInvalid(f"stage {i}: unknown activation {st.activation!r}")
            shape = (st.d_out,)
        else:
            raise SpecInvalid(f"stage {i}: unknown stage {st!r}")
    last = spec.stages[-1]
    if not (isinstance(last, Fc) and last.d_out == NUM_CLASSES and last.activation == NONE):
        raise SpecInvalid("last stage must be Fc(..., 10, none) producing logits")


def stage_shapes(st: Stage) -> dict:
    if isinstance(st, Lst):
        return {"W1": (st.d_out, st.d_in), "b1": (st.d_out,), "W2": (st.d_out, st.d_in), "b2": (st.d_out,)}
    if isinstance(st, ResLst):
        return {"W1": (st.d, st.d), "b1": (st.d,), "W2": (st.d, st.d), "b2": (st.d,)}
    if isinstance(st, Fc):
        return {"W": (st.d_out, st.d_in), "b": (st.d_out,)}
    return {}


def param_count(spec: ModelSpec) -> int:
    validate_spec(spec)
    total = 0
    for st in spec.stages:
        if isinstance(st, Lst):
            total += 2 * (st.d_in + 1) * st.d_out
        elif isinstance(st, ResLst):
            total += 2 * (st.d + 1) * st.d
        elif isinstance(st, Fc):
            total += (st.d_in + 1) * st.d_out
    return total


def weight_count(spec: ModelSpec) -> int:
    """Like :func:`param_count` but without biases."""
    validate_spec(spec)
    total = 0
    for st in spec.stages:
        for k, shape in stage_shapes(st).items():
            if k.startswith("W"):
                total += int(np.prod(shape))
    return total


def count_values(params: list) -> int:
    return sum(int(a.size) for p in params for a in p.values())


def zero_params(spec: ModelSpec, dtype=np.float64) -> list:
    return [{k: np.zeros(s, dtype=dtype) for k, s in stage_shapes(st).items()} for st in spec.stages]


def check_params(spec: ModelSpec, params: list) -> None:
    if len(params) != len(spec.stages):
        raise ShapeMismatch(f"{len(params)} parameter groups for {len(spec.stages)} stages")
    for i, (st, p) in enumerate(zip(spec.stages, params)):
        want = stage_shapes(st)
        if set(p) != set(want):
            raise ShapeMismatch(f"stage {i}: parameter keys {sorted(p)} != {sorted(want)}")
        for k, s in want.items():
            if tuple(p[k].shape) != s:
                raise ShapeMismatch(f"stage {i}: {k} has shape {p[k].shape}, expected {s}")


# Forward operations ----------------------------------------------------------

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == TANH else z


def fc_forward(layer: FcLayer, x: np.ndarray) -> np.ndarray:
    """``g(W x + b)`` for a vector, or row-wise for a stack of vectors."""
    x = np.asarray(x)
    if x.shape[-1:] != (layer.d_in,):
        raise ShapeMismatch(f"FC layer expects {layer.d_in} inputs, got shape {x.shape}")
    return _activate(x @ layer.W.T + layer.b, layer.activation)


def _check_square(X: np.ndarray, d: int) -> None:
    if X.shape[-2:] != (d, d):
        raise ShapeMismatch(f"expected {d}x{d} input, got shape {X.shape}")


def lst_forward(block: LstBlock, X: np.ndarray) -> np.ndarray:
    """Matrix form of the LST block; accepts one image or a stack ``(..., d, d)``."""
    X = np.asarray(X)
    _check_square(X, block.d_in)
    V = np.tanh(X @ block.fc_row.W.T + block.fc_row.b)
    return np.tanh(block.fc_col.W @ V + block.fc_col.b[:, None])


def lst_forward_loop(block: LstBlock, X: np.ndarray) -> np.ndarray:
    """Row-then-column loop over a single image, one FC call per row/column."""
    X = np.asarray(X)
    _check_square(X, block.d_in)
    V = np.empty((block.d_in, block.d_out), dtype=np.result_type(X, block.fc_row.W))
    for k in range(block.d_in):
        V[k, :] = fc_forward(block.fc_row, X[k, :])
    Y = np.empty((block.d_out, block.d_out), dtype=V.dtype)
    for k in range(block.d_out):
        Y[:, k] = fc_forward(block.fc_col, V[:, k])
    return Y


def res_lst_forward(block: LstBlock, X: np.ndarray) -> np.ndarray:
    if block.d_in != block.d_out:
        raise ShapeMismatch("residual LST needs d_in == d_out")
    return lst_forward(block, X) + X


def flatten(X: np.ndarray) -> np.ndarray:
    """Row-major flatten of the trailing two axes: ``(i, j) -> i * d + j``."""
    X = np.asarray(X)
    return X.reshape(X.shape[:-2] + (X.shape[-2] * X.shape[-1],))


def stage_forward(st: Stage, p: dict, x: np.ndarray) -> np.ndarray:
    if isinstance(st, Lst):
        return lst_forward(LstBlock.from_params(p), x)
    if isinstance(st, ResLst):
        return res_lst_forward(LstBlock.from_params(p), x)
    if isinstance(st, Flatten):
        return flatten(x)
    if isinstance(st, Fc):
        return fc_forward(FcLayer(p["W"], p["b"], st.activation), x)
    raise SpecInvalid(f"unknown stage {st!r}")


def model_forward(spec: ModelSpec, params: list, X: np.ndarray) -> np.ndarray:
    """Logits for one 28x28 image, shape (10,), or a batch (N, 28, 28) -> (N, 10)."""
    validate_spec(spec, input_size=np.shape(X)[-1])
    check_params(spec, params)
    out = np.asarray(X)
    for st, p in zip(spec.stages, params):
        out = stage_forward(st, p, out)
    return out


def ffnn_forward(widths, params: list, x: np.ndarray) -> np.ndarray:
    """Plain FC stack: tanh on hidden layers, identity on the output layer.

    ``params`` holds one ``{"W", "b"}`` dict per layer.
    """
    widths = list(widths)
    x = np.asarray(x)
    if x.shape[-1] != widths[0]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, widths start at {widths[0]}")
    if len(params) != len(widths) - 1:
        raise ShapeMismatch(f"{len(params)} layers given for widths {widths}")
    for i, p in enumerate(params):
        act = NONE if i == len(params) - 1 else TANH
        x = fc_forward(FcLayer(p["W"], p["b"], act), x)
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# Model files -------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic      4 bytes   b"LST1" (float parameters) or b"LSQ1" (Q5.7 words)
#   version    u32
#   spec_len   u32
#   spec       spec_len bytes of UTF-8 JSON
#   payload    parameters in stage order, keys in stage_shapes order, row-major;
#              f64 for LST1, i16 raw words for LSQ1
#   crc        u32, CRC-32 of every preceding byte

FLOAT_MAGIC = b"LST1"
QUANT_MAGIC = b"LSQ1"
FORMAT_VERSION = 1


def spec_to_dict(spec: ModelSpec) -> dict:
    stages = []
    for st in spec.stages:
        if isinstance(st, Lst):
            stages.append({"type": "lst", "d_in": st.d_in, "d_out": st.d_out})
        elif isinstance(st, ResLst):
            stages.append({"type": "reslst", "d": st.d})
        elif isinstance(st, Flatten):
            stages.append({"type": "flatten"})
        elif isinstance(st, Fc):
            stages.append({"type": "fc", "d_in": st.d_in, "d_out": st.d_out, "activation": st.activation})
    return {"name": spec.name, "stages": stages}


def spec_from_dict(d: dict) -> ModelSpec:
    stages = []
    for s in d["stages"]:
        kind = s["type"]
        if kind == "lst":
            stages.append(Lst(s["d_in"], s["d_out"]))
        elif kind == "reslst":
            stages.append(ResLst(s["d"]))
        elif kind == "flatten":
            stages.append(Flatten())
        elif kind == "fc":
            stages.append(Fc(s["d_in"], s["d_out"], s.get("activation", NONE)))
        else:
            raise SpecInvalid(f"unknown stage type {kind!r}")
    spec = ModelSpec(d["name"], tuple(stages))
    validate_spec(spec)
    return spec


def write_container(path, magic: bytes, spec: ModelSpec, payload: bytes) -> None:
    text = json.dumps(spec_to_dict(spec), sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<II", FORMAT_VERSION, len(text)) + text + payload
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def read_container(path, magic: bytes) -> tuple[ModelSpec, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ChecksumMismatch(f"{path}: file too short ({len(data)} bytes)")
    if data[:4] != magic:
        raise BadMagic(f"{path}: magic {data[:4]!r}, expected {magic!r}")
    version, spec_len = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    if len(data) < 16 + spec_len:
        raise ChecksumMismatch(f"{path}: truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: CRC-32 mismatch")
    spec = spec_from_dict(json.loads(body[12:12 + spec_len].decode("utf-8")))
    return spec, body[12 + spec_len:]


def pack_params(spec: ModelSpec, params: list, dtype: str) -> bytes:
    check_params(spec, params)
    chunks = []
    for st, p in zip(spec.stages, params):
        for k in stage_shapes(st):
            chunks.append(np.ascontiguousarray(p[k]).astype(dtype).tobytes())
    return b"".join(chunks)


def unpack_params(spec: ModelSpec, payload: bytes, dtype: str) -> list:
    width = np.dtype(dtype).itemsize
    expected = param_count(spec) * width
    if len(payload) != expected:
        raise ChecksumMismatch(f"parameter block is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    params, pos = [], 0
    for st in spec.stages:
        p = {}
        for k, shape in stage_shapes(st).items():
            n = int(np.prod(shape))
            p[k] = flat[pos:pos + n].reshape(shape).copy()
            pos += n
        params.append(p)
    return params


def save_model(spec: ModelSpec, params: list, path) -> None:
    write_container(path, FLOAT_MAGIC, spec, pack_params(spec, params, "<f8"))


def load_model(path) -> tuple[ModelSpec, list]:
    spec, payload = read_container(path, FLOAT_MAGIC)
    params = unpack_params(spec, payload, "<f8")
    return spec, [{k: v.astype(np.float64) for k, v in p.items()} for p in params]


def file_magic(path) -> bytes:
    with open(os.fspath(path), "rb") as fh:
        return fh.read(4)
