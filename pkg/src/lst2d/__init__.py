"""Learned 2D separable transform networks for MNIST, with a Q5.7 golden model."""

from .nn_core import (
    Fc,
    Flatten,
    Lst,
    ModelSpec,
    ResLst,
    load_model,
    lst1,
    lst2,
    model_forward,
    param_count,
    reslst3,
    save_model,
    spec_by_name,
)

__version__ = "0.1.0"
