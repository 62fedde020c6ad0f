"""Multi-view / multi-queue self-supervised representation learning.

Student/teacher momentum encoders, dual FIFO negative queues, and
temperature-sharpened relational distillation losses, built on a small
numpy autodiff core. See the README for the training, evaluation and
analysis entry points.
"""

__version__ = "0.1.0"

from .errors import MsvqError  # noqa: F401
