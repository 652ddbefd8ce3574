"""Generative assignment flows for joint distributions of discrete variables."""

import os as _os

if "AFGEN_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["AFGEN_THREADS"])

__version__ = "0.1.0"
