"""Collaborative graph learning for health-event prediction.

Library layout: autodiff (reverse-mode engine), ontology (disease hierarchy),
graphs (patient-code and code-code adjacencies), text (TF-IDF note targets),
model (network, loss, training), data (datasets and the synthetic generator),
metrics (evaluation), checkpoint (save/load), experiment (assembly), cli.
"""

import os as _os

# Cap BLAS parallelism before numpy loads; explicit settings win.
_threads = _os.environ.get("CGL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from . import autodiff, checkpoint, data, experiment, graphs, metrics, model, ontology, text
from .model import CollaborativeGraphModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checkpoint",
    "data",
    "experiment",
    "graphs",
    "metrics",
    "model",
    "ontology",
    "text",
    "CollaborativeGraphModel",
    "ModelConfig",
    "__version__",
]
