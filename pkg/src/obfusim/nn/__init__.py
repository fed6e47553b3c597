from .layers import (
    Param,
    ShapeError,
    TextCnnEncoder,
    LstmCell,
    LstmState,
    DenseLayer,
    DenseHead,
    softmax,
    one_hot,
    cross_entropy,
    cross_entropy_dlogits,
)
from .optim import SgdOptimizer, clip_gradients, global_grad_norm
from .gradcheck import grad_check
from .checkpoint import save_arrays, load_arrays

__all__ = [
    "Param",
    "ShapeError",
    "TextCnnEncoder",
    "LstmCell",
    "LstmState",
    "DenseLayer",
    "DenseHead",
    "softmax",
    "one_hot",
    "cross_entropy",
    "cross_entropy_dlogits",
    "SgdOptimizer",
    "clip_gradients",
    "global_grad_norm",
    "grad_check",
    "save_arrays",
    "load_arrays",
]
