"""ralab: robust active learning under a labeling budget.

Trains small image classifiers with standard or PGD-adversarial training
inside a pool-based active-learning loop, ships twelve acquisition functions
including density-based robust sampling with entropy, and provides the
selection-bias analysis and test-selection retraining harnesses.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
