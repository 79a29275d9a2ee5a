"""Bit-exact Q5.7 golden model of the LST-1 inference datapath.

Words are 12-bit two's complement with 7 fractional bits, handled here as
plain integers ``raw`` in ``[-2048, 2047]`` meaning ``raw / 128``. A MAC
accumulates exact products at scale ``2**-14`` in a 33-bit register (the
smallest that holds 785 worst-case products plus a bias), adds the
bias shifted left by 7, then rescales once: round half away from zero on
``acc / 2**7`` and saturate to the word range.

Inference runs five stages over a single 28x28 word RAM:

1. quantize the input image into RAM;
2. each row through the 28 row PEs (``W1``, ``b1``), tanh, written back in place;
3. each column through the 28 column PEs (``W2``, ``b2``), tanh, written back;
4. RAM read row-major into the 10 output PEs, no activation;
5. index of the largest output, lowest index on ties.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch, UnsupportedSpec
from .nn_core import (
    QUANT_MAGIC,
    Fc,
    Flatten,
    Lst,
    ModelSpec,
    check_params,
    pack_params,
    read_container,
    unpack_params,
    write_container,
)

FRAC_BITS = 7
ONE = 1 << FRAC_BITS
WORD_BITS = 12
WORD_MIN = -(1 << (WORD_BITS - 1))
WORD_MAX = (1 << (WORD_BITS - 1)) - 1
ACC_BITS = 33
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1
MAX_TERMS = 785

TANH_KNEE = 2 * ONE  # |x| = 2.0


@dataclass
class SaturationStats:
    """Counters for silent saturation events."""

    quantize_total: int = 0
    quantize_saturated: int = 0
    mac_total: int = 0
    mac_saturated: int = 0

    @property
    def mac_fraction(self) -> float:
        return self.mac_saturated / self.mac_total if self.mac_total else 0.0


# Scalar arithmetic ---------------------------------------------------------------

def round_half_away(num: int, den: int) -> int:
    """``num / den`` rounded to nearest, ties away from zero (``den > 0``)."""
    q, r = divmod(abs(num), den)
    if 2 * r >= den:
        q += 1
    return q if num >= 0 else -q


def saturate(raw: int) -> int:
    return WORD_MAX if raw > WORD_MAX else WORD_MIN if raw < WORD_MIN else raw


def quantize(x: float, stats: Optional[SaturationStats] = None) -> int:
    """Real -> Q5.7 raw word: round half away from zero, then saturate."""
    scaled = float(x) * ONE
    mag = np.floor(abs(scaled) + 0.5)
    raw = int(mag if scaled >= 0 else -mag)
    out = saturate(raw)
    if stats is not None:
        stats.quantize_total += 1
        stats.quantize_saturated += out != raw
    return out


def dequantize(raw: int) -> float:
    return raw / ONE


def word_in_range(raw: int) -> bool:
    return WORD_MIN <= raw <= WORD_MAX


def mac_dot(weights: Sequence[int], inputs: Sequence[int], bias: int,
            stats: Optional[SaturationStats] = None) -> int:
    """One PE: exact dot product plus bias in the accumulator, rescaled to Q5.7."""
    if len(weights) != len(inputs):
        raise ShapeMismatch(f"{len(weights)} weights for {len(inputs)} inputs")
    if len(weights) > MAX_TERMS:
        raise ShapeMismatch(f"at most {MAX_TERMS} terms per MAC, got {len(weights)}")
    acc = int(bias) << FRAC_BITS
    for w, x in zip(weights, inputs):
        acc += int(w) * int(x)
    if not ACC_MIN <= acc <= ACC_MAX:
        raise OverflowError(f"accumulator overflow: {acc}")
    raw = round_half_away(acc, 1 << FRAC_BITS)
    out = saturate(raw)
    if stats is not None:
        stats.mac_total += 1
        stats.mac_saturated += out != raw
    return out


def tanh_approx_fixed(raw: int) -> int:
    """Piecewise quadratic tanh on a Q5.7 word.

    ``sign(x)`` for ``|x| > 2``, otherwise ``(1 - |x|/4) * x``. The ``x/4``
    term is a two-bit binary-point shift kept at full precision (scale
    ``2**-9``), so the product ``(512 - |raw|) * |raw|`` sits at scale
    ``2**-16`` and is rescaled once, round half away from zero. The sign is
    applied to the magnitude result, making the table exactly odd.
    ``raw = -2048`` saturates to -1.0 like any other ``x < -2``.
    """
    if raw > TANH_KNEE:
        return ONE
    if raw < -TANH_KNEE:
        return -ONE
    mag = abs(raw)
    out = round_half_away((4 * ONE - mag) * mag, 4 * ONE)
    return out if raw >= 0 else -out


def tanh_approx_float(x):
    """The same piecewise quadratic in real arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    poly = (1.0 - np.abs(x) / 4.0) * x
    return np.where(np.abs(x) > 2.0, np.sign(x), poly)


TANH_TABLE = np.array([tanh_approx_fixed(r) for r in range(WORD_MIN, WORD_MAX + 1)], dtype=np.int64)


# Vectorized arithmetic (bit-identical to the scalar versions) -----------------

def round_half_away_array(num: np.ndarray, shift: int) -> np.ndarray:
    mag = (np.abs(num) + (1 << (shift - 1))) >> shift
    return np.where(num >= 0, mag, -mag)


def saturate_array(raw: np.ndarray, stats: Optional[SaturationStats] = None, kind: str = "mac"):
    out = np.clip(raw, WORD_MIN, WORD_MAX)
    if stats is not None:
        n, s = int(raw.size), int(np.count_nonzero(out != raw))
        if kind == "mac":
            stats.mac_total += n
            stats.mac_saturated += s
        else:
            stats.quantize_total += n
            stats.quantize_saturated += s
    return out


def quantize_array(x, stats: Optional[SaturationStats] = None) -> np.ndarray:
    scaled = np.asarray(x, dtype=np.float64) * ONE
    raw = (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)
    return saturate_array(raw, stats, kind="quantize")


def mac_array(inputs: np.ndarray, weights: np.ndarray, bias: np.ndarray,
              stats: Optional[SaturationStats] = None) -> np.ndarray:
    """All PEs at once: ``inputs (..., n) x weights (pe, n) + bias (pe,) -> (..., pe)`` words."""
    acc = inputs.astype(np.int64) @ weights.astype(np.int64).T + (bias.astype(np.int64) << FRAC_BITS)
    if acc.size and (acc.min() < ACC_MIN or acc.max() > ACC_MAX):
        raise OverflowError("accumulator overflow")
    return saturate_array(round_half_away_array(acc, FRAC_BITS), stats)


def tanh_array(raw: np.ndarray) -> np.ndarray:
    return TANH_TABLE[np.asarray(raw, dtype=np.int64) - WORD_MIN]


# Quantized model -------------------------------------------------------------------

def is_lst1_shape(spec: ModelSpec) -> bool:
    return tuple(spec.stages) == (Lst(28, 28), Flatten(), Fc(784, 10))


@dataclass
class QuantizedModel:
    spec: ModelSpec
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    saturated: int = 0

    def params(self) -> list:
        return [{"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}, {}, {"W": self.Wo, "b": self.bo}]

    def dequantized(self) -> list:
        return [{k: v / ONE for k, v in p.items()} for p in self.params()]


def quantize_model(spec: ModelSpec, params: list) -> QuantizedModel:
    if not is_lst1_shape(spec):
        raise UnsupportedSpec(f"only the LST-1 layout maps to the fixed-point datapath, got {spec.name!r}")
    check_params(spec, params)
    stats = SaturationStats()
    lst, _, fc = params
    q = {k: quantize_array(v, stats) for k, v in {**lst, "Wo": fc["W"], "bo": fc["b"]}.items()}
    return QuantizedModel(spec, q["W1"], q["b1"], q["W2"], q["b2"], q["Wo"], q["bo"], stats.quantize_saturated)


def _quantized_from_params(spec: ModelSpec, params: list) -> QuantizedModel:
    lst, _, fc = params
    arr = {k: np.asarray(v, dtype=np.int64) for k, v in lst.items()}
    return QuantizedModel(spec, arr["W1"], arr["b1"], arr["W2"], arr["b2"],
                          np.asarray(fc["W"], dtype=np.int64), np.asarray(fc["b"], dtype=np.int64))


def save_quantized(qm: QuantizedModel, path) -> None:
    write_container(path, QUANT_MAGIC, qm.spec, pack_params(qm.spec, qm.params(), "<i2"))


def load_quantized(path) -> QuantizedModel:
    spec, payload = read_container(path, QUANT_MAGIC)
    if not is_lst1_shape(spec):
        raise UnsupportedSpec(f"quantized file holds unsupported model {spec.name!r}")
    return _quantized_from_params(spec, unpack_params(spec, payload, "<i2"))


# Staged inference --------------------------------------------------------------------

@dataclass
class StagedResult:
    digit: int
    outputs: np.ndarray  # the 10 stage-4 words
    trace: dict = field(default_factory=dict)  # stage name -> RAM snapshot


def infer_staged(qm: QuantizedModel, image, row_order=None, col_order=None,
                 stats: Optional[SaturationStats] = None) -> StagedResult:
    """Run the five-stage in-place schedule on one image and keep RAM snapshots.

    ``row_order``/``col_order`` permute the processing order inside stages 2
    and 3; each row (column) result is buffered in full before it is written
    back, so the order cannot change the outcome.
    """
    image = np.asarray(image)
    if image.shape != (28, 28):
        raise ShapeMismatch(f"expected a 28x28 image, got {image.shape}")
    trace = {}
    ram = quantize_array(image, stats)
    trace["stage1"] = ram.copy()

    for k in (range(28) if row_order is None else row_order):
        rg = mac_array(ram[k, :], qm.W1, qm.b1, stats)
        ram[k, :] = tanh_array(rg)
    trace["stage2"] = ram.copy()

    for k in (range(28) if col_order is None else col_order):
        rg = mac_array(ram[:, k], qm.W2, qm.b2, stats)
        ram[:, k] = tanh_array(rg)
    trace["stage3"] = ram.copy()

    outputs = mac_array(ram.reshape(784), qm.Wo, qm.bo, stats)
    trace["stage4"] = outputs.copy()
    return StagedResult(int(np.argmax(outputs)), outputs, trace)


def infer_batch(qm: QuantizedModel, images, stats: Optional[SaturationStats] = None):
    """Vectorized equivalent of :func:`infer_staged` over ``(N, 28, 28)`` images.

    Returns ``(digits, outputs)`` with outputs shaped ``(N, 10)``.
    """
    images = np.asarray(images)
    if images.shape[1:] != (28, 28):
        raise ShapeMismatch(f"expected (N, 28, 28) images, got {images.shape}")
    ram = quantize_array(images, stats)
    ram = tanh_array(mac_array(ram, qm.W1, qm.b1, stats))
    # column k of the RAM is an input vector; transpose so it becomes a row
    ram = np.swapaxes(tanh_array(mac_array(np.swapaxes(ram, 1, 2), qm.W2, qm.b2, stats)), 1, 2)
    outputs = mac_array(ram.reshape(len(images), 784), qm.Wo, qm.bo, stats)
    return np.argmax(outputs, axis=1), outputs


def quantized_accuracy(qm: QuantizedModel, images, labels, stats: Optional[SaturationStats] = None,
                       chunk: int = 1000) -> float:
    correct = 0
    for s in range(0, len(images), chunk):
        digits, _ = infer_batch(qm, images[s:s + chunk], stats)
        correct += int(np.sum(digits == labels[s:s + chunk]))
    return correct / len(images)


# ROM and test-vector export ------------------------------------------------------------

def word_hex(raw: int) -> str:
    """Three lowercase hex digits of the 12-bit two's-complement pattern."""
    return f"{int(raw) & 0xFFF:03x}"


def parse_word_hex(text: str) -> int:
    v = int(text, 16)
    return v - (1 << WORD_BITS) if v & (1 << (WORD_BITS - 1)) else v


def _write_words(path, words) -> None:
    with open(path, "w") as fh:
        fh.write("".join(word_hex(w) + "\n" for w in words))


def export_roms(qm: QuantizedModel, out_dir) -> list:
    """Write ``rom_row_<k>.hex``, ``rom_col_<k>.hex`` and ``rom_out_<j>.hex``.

    Each file holds the PE's weight row followed by its bias, one word per line.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for prefix, W, b in (("rom_row", qm.W1, qm.b1), ("rom_col", qm.W2, qm.b2), ("rom_out", qm.Wo, qm.bo)):
        for k in range(W.shape[0]):
            path = os.path.join(out_dir, f"{prefix}_{k}.hex")
            _write_words(path, list(W[k]) + [b[k]])
            paths.append(path)
    return paths


def write_test_vectors(qm: QuantizedModel, images, path) -> int:
    """One line per image: 784 input words, the expected digit, then the 10 output words.

    All fields are whitespace separated; words are 3-digit hex, the digit is decimal.
    """
    images = np.asarray(images)
    digits, outputs = infer_batch(qm, images)
    inputs = quantize_array(images).reshape(len(images), 784)
    with open(path, "w") as fh:
        fh.write("# input[784] digit output[10]; words are 12-bit two's complement hex\n")
        for x, d, o in zip(inputs, digits, outputs):
            fh.write(" ".join(word_hex(w) for w in x))
            fh.write(f" {int(d)} ")
            fh.write(" ".join(word_hex(w) for w in o))
            fh.write("\n")
    return len(images)


def read_test_vectors(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            tok = line.split()
            records.append((
                np.array([parse_word_hex(t) for t in tok[:784]], dtype=np.int64),
                int(tok[784]),
                np.array([parse_word_hex(t) for t in tok[785:795]], dtype=np.int64),
            ))
    return records
