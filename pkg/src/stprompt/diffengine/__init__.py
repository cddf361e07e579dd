"""Small reverse-mode array engine on top of numpy."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_registered, grad_check, inception_receptive_field, receptive_field
from .params import FrozenParameterError, ParamStore, count_params
from .tensor import GraphConsumedError, NonFiniteError, Tensor, backward, no_grad

__all__ = [
    "ops", "Tensor", "backward", "no_grad", "NonFiniteError", "GraphConsumedError",
    "ParamStore", "count_params", "FrozenParameterError", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "grad_check", "GradCheckReport", "check_registered", "receptive_field",
    "inception_receptive_field",
]
