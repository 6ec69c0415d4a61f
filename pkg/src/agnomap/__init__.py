"""Input-agnostic saliency mapping for small convolutional classifiers."""

import os

# BLAS reads its thread count at load time, so this must run before numpy is imported.
if os.environ.get("AGNOMAP_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["AGNOMAP_THREADS"])

from .errors import AgnomapError, ConfigError, InputError, TrainingError  # noqa: E402

__version__ = "0.1.0"
