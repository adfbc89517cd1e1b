"""Dense tensors, reverse-mode autodiff, seeded RNG and the RKVT file format."""
from . import ops
from .gradcheck import GradCheckReport, NondeterministicError, grad_check
from .nn import Adam, Conv2d, GroupNorm, Linear, Module, parameter
from .rkvt import RkvtError
from .rkvt import load as load_rkvt
from .rkvt import save as save_rkvt
from .rng import Rng
from .tensor import Tape, Tensor, backward, default_dtype, get_tape, no_grad, precision

__all__ = [
    "Adam", "Conv2d", "GradCheckReport", "GroupNorm", "Linear", "Module",
    "NondeterministicError", "RkvtError", "Rng", "Tape", "Tensor", "backward",
    "default_dtype", "get_tape", "grad_check", "load_rkvt", "no_grad", "ops",
    "parameter", "precision", "save_rkvt",
]
