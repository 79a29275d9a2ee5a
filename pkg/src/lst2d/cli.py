"""``lst2d`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import fixed_point as fx
from . import mnist_io
from .errors import LstError
from .nn_core import (
    QUANT_MAGIC,
    file_magic,
    load_model,
    model_forward,
    param_count,
    save_model,
    spec_by_name,
)
from .train import (
    TrainConfig,
    evaluate,
    gradcheck,
    init_params,
    train,
    write_history_csv,
)

log = logging.getLogger("lst2d")

DEFAULT_DATA_DIR = os.environ.get("LST2D_DATA", os.path.join("data", "mnist"))
PAPER_MODELS = ("lst1", "lst2", "reslst3")
BASELINES = ("ffnn:784-12-10", "ffnn:784-40-40-40-10")
GRADCHECK_TOL = 1e-5


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _tag(model: str) -> str:
    return model.replace(":", "_")


def _need_data(data_dir: str) -> None:
    if not mnist_io.has_mnist(data_dir):
        raise FileNotFoundError(f"MNIST IDX files not found in {data_dir!r} (see --data-dir)")


def _load_float_or_quantized(path: str, quantized: bool):
    """Returns ``(spec, params, qm)``; ``params`` is None for a quantized file."""
    magic = file_magic(path)
    if magic == QUANT_MAGIC:
        qm = fx.load_quantized(path)
        return qm.spec, None, qm
    spec, params = load_model(path)
    qm = fx.quantize_model(spec, params) if quantized else None
    return spec, params, qm


def cmd_train(args) -> int:
    spec = spec_by_name(args.model)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      weight_decay=args.weight_decay, seed=args.seed, precision=args.precision)
    _need_data(args.data_dir)
    ds_train, ds_test = mnist_io.load_mnist(args.data_dir)
    os.makedirs(args.out_dir, exist_ok=True)
    model_path = args.model_path or os.path.join(args.out_dir, f"{_tag(args.model)}.lst")
    result = train(spec, ds_train, ds_test, cfg)
    save_model(spec, result.params, model_path)
    stem = os.path.join(args.out_dir, f"{_tag(args.model)}_history")
    write_history_csv(result.history, stem + ".csv")
    if not args.no_plot:
        from .plots import plot_history
        plot_history(result.history, stem + ".png", title=args.model)
    print(f"model: {model_path}")
    print(f"params: {param_count(spec)}")
    print(f"test accuracy: {100 * result.history[-1].test_accuracy:.2f}%")
    return 0


def cmd_eval(args) -> int:
    spec, params, qm = _load_float_or_quantized(args.model_path, args.quantized)
    _need_data(args.data_dir)
    ds = mnist_io.load_split(args.data_dir, train=False)
    if qm is not None:
        acc = fx.quantized_accuracy(qm, ds.images, ds.labels)
        mode = "quantized"
    else:
        acc = evaluate(spec, params, ds)
        mode = "float"
    print(f"model: {spec.name} ({mode})")
    print(f"params: {param_count(spec)}")
    print(f"test accuracy: {100 * acc:.2f}%")
    return 0


def cmd_quantize(args) -> int:
    spec, params = load_model(args.model_path)
    qm = fx.quantize_model(spec, params)
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.model_path))[0]
    out = os.path.join(args.out_dir, stem + ".lsq")
    fx.save_quantized(qm, out)
    print(f"quantized model: {out}")
    print(f"saturated parameters: {qm.saturated}")
    if mnist_io.has_mnist(args.data_dir):
        ds = mnist_io.load_split(args.data_dir, train=False)
        stats = fx.SaturationStats()
        float_acc = evaluate(spec, params, ds)
        quant_acc = fx.quantized_accuracy(qm, ds.images, ds.labels, stats)
        print(f"float accuracy: {100 * float_acc:.2f}%")
        print(f"quantized accuracy: {100 * quant_acc:.2f}%")
        print(f"delta: {100 * (quant_acc - float_acc):+.2f} pp")
        print(f"saturated MAC outputs: {stats.mac_saturated}/{stats.mac_total} ({100 * stats.mac_fraction:.4f}%)")
    else:
        log.warning("no MNIST data in %s; skipping accuracy comparison", args.data_dir)
    return 0


def cmd_export_rom(args) -> int:
    spec, params, qm = _load_float_or_quantized(args.model_path, quantized=True)
    paths = fx.export_roms(qm, args.out_dir)
    print(f"rom files: {len(paths)} in {args.out_dir}")
    if mnist_io.has_mnist(args.data_dir):
        ds = mnist_io.load_split(args.data_dir, train=False)
        vec_path = os.path.join(args.out_dir, "test_vectors.txt")
        n = fx.write_test_vectors(qm, ds.images[:args.num_vectors], vec_path)
        print(f"test vectors: {n} in {vec_path}")
    else:
        log.warning("no MNIST data in %s; test-vector file not written", args.data_dir)
    if not args.no_plot:
        from .plots import plot_tanh_approx
        plot_tanh_approx(os.path.join(args.out_dir, "tanh_approx.png"))
    return 0


def _read_image(path: str, index: int) -> np.ndarray:
    data = mnist_io.read_bytes(path)
    if len(data) == 784:
        return np.frombuffer(data, dtype=np.uint8).reshape(28, 28) / 255.0
    raw = mnist_io.parse_idx_images(data)
    if not 0 <= index < raw.count:
        raise IndexError(f"image index {index} outside 0..{raw.count - 1}")
    return mnist_io.normalize(raw)[index]


def cmd_predict(args) -> int:
    spec, params, qm = _load_float_or_quantized(args.model_path, args.quantized)
    image = _read_image(args.image, args.index)
    if qm is not None:
        digit = fx.infer_staged(qm, image).digit
    else:
        digit = int(np.argmax(model_forward(spec, params, image)))
    print(digit)
    return 0


def cmd_gradcheck(args) -> int:
    spec = spec_by_name(args.model)
    rng = np.random.default_rng(args.seed)
    params = init_params(spec, args.seed, np.float64)
    for p in params:
        for k in p:
            # nonzero biases so every gradient path is exercised
            p[k] = p[k] + 0.05 * rng.standard_normal(p[k].shape)
    images = rng.random((args.samples, 28, 28))
    labels = rng.integers(0, 10, size=args.samples)
    err = gradcheck(spec, params, images, labels)
    print(f"max relative error: {err:.3e}")
    return 0 if err <= GRADCHECK_TOL else 1


def cmd_paramcount(args) -> int:
    if args.model:
        print(f"params: {param_count(spec_by_name(args.model))}")
        return 0
    for name in PAPER_MODELS + BASELINES:
        print(f"{name}: {param_count(spec_by_name(name))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", default=DEFAULT_DATA_DIR, help="directory holding the MNIST IDX files")
    common.add_argument("--out-dir", default="runs", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lst2d", description="Learned separable transform MNIST models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--model", default="lst1", help="lst1, lst2, reslst3 or ffnn:<widths>")
    p.add_argument("--model-path", help="where to write the model file")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=_positive_int, default=300)
    p.add_argument("--batch-size", type=_positive_int, default=1000)
    p.add_argument("--lr", type=_positive_float, default=2e-3)
    p.add_argument("--weight-decay", type=_nonneg_float, default=1e-5)
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--no-plot", action="store_true", help="skip the history figure")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="test-set accuracy of a model file")
    p.add_argument("--model-path", required=True)
    p.add_argument("--quantized", action="store_true", help="run the fixed-point datapath")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", parents=[common], help="quantize an LST-1 model to Q5.7")
    p.add_argument("--model-path", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export-rom", parents=[common], help="write ROM hex files and test vectors")
    p.add_argument("--model-path", required=True, help="float (.lst) or quantized (.lsq) LST-1 file")
    p.add_argument("--num-vectors", type=_positive_int, default=100)
    p.add_argument("--no-plot", action="store_true", help="skip the tanh figure")
    p.set_defaults(func=cmd_export_rom)

    p = sub.add_parser("predict", parents=[common], help="classify one image")
    p.add_argument("--model-path", required=True)
    p.add_argument("--image", required=True, help="IDX image file or raw 784-byte image")
    p.add_argument("--index", type=int, default=0, help="image index inside an IDX file")
    p.add_argument("--quantized", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--model", default="lst1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=_positive_int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("paramcount", parents=[common], help="print parameter counts")
    p.add_argument("--model")
    p.set_defaults(func=cmd_paramcount)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (LstError, OSError, ValueError, IndexError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
