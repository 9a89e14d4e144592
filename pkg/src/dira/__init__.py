"""Few-sample domain adaptation with an elastic-weight penalty, on a small numpy autodiff engine."""
from .adapt import AdaptConfig, AdaptResult, dira_adapt, evaluate, ewc_penalty, naive_sgd_adapt
from .corruptions import KINDS, CorruptionSpec, corrupt
from .data import LabeledSet, load_digits, load_idx, make_synthetic, sample_target, split
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DiraError, DomainError,
                     FormatError, IntegrityError, NumericError)
from .fisher import FisherDiag, estimate_fisher, load_fisher, save_fisher
from .models import Model, ModelSpec, ParamSet, build, load, save

__version__ = "0.1.0"
