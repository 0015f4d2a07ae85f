"""
Eye Segmentation Domain Generalization Package

Synthetic multi-domain eye images, elliptical segmentation training with
center-of-mass supervision, the four generalization tests and MAD-unit reporting.
"""

import os

from dotenv import load_dotenv

load_dotenv()

# Kernel parallelism must be capped before numpy loads its BLAS backend
_threads = os.environ.get("EYESEG_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "1.0.0"
