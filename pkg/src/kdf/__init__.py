"""kdf: distilling a residual squeeze-excitation facial-expression CNN into smaller students.

Everything runs on a small numpy autodiff engine (``kdf.tensor``).
"""

__version__ = "0.1.0"

from .distill import DistillConfig, combined_loss, cross_entropy, kl_div_loss  # noqa: E402
from .estimators import DistilledClassifier, FERClassifier, load_classifier  # noqa: E402
from .tensor import Tensor, check_gradients, no_grad  # noqa: E402
from .train import TrainConfig, fit  # noqa: E402
from .zoo import ModelConfig, build, inspect, model_size, preset  # noqa: E402

__all__ = [
    "DistillConfig", "DistilledClassifier", "FERClassifier", "ModelConfig", "Tensor", "TrainConfig",
    "build", "check_gradients", "combined_loss", "cross_entropy", "fit", "inspect", "kl_div_loss",
    "load_classifier", "model_size", "no_grad", "preset",
]
