"""cov3d - CT-scan COVID-19 detection and severity classification toolkit."""

__version__ = "0.3.0"

from cov3d.config import PipelineConfig, RunConfig, TrainConfig, load_run_config
from cov3d.ensemble import ensemble_average, evaluate, macro_f1
from cov3d.errors import Cov3DError

__all__ = (
    "__version__",
    "Cov3DError",
    "PipelineConfig",
    "RunConfig",
    "TrainConfig",
    "ensemble_average",
    "evaluate",
    "load_run_config",
    "macro_f1",
)
