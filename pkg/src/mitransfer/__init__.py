"""Subject-independent motor-imagery EEG decoding with a small numpy autodiff.

Submodules:

- ``tensor``, ``functional``, ``gradcheck``: reverse-mode autodiff and ops
- ``models``: EEGNet, DeepConvNet, MIN2Net, losses, checkpoints
- ``training``: Adam, plateau schedule, early stopping, ``fit``
- ``data``: MIEP file format, synthetic motor-imagery EEG
- ``evaluation``: leave-one-subject-out campaigns and summaries
- ``stats``: Shapiro-Wilk, Friedman, Wilcoxon, Holm
- ``report``, ``cli``: SVG/JSON/CSV reports and the command line
"""
from .data import EpochedDataset, SubjectRecord, SynthConfig, load_dataset, save_dataset, synthesize_dataset
from .evaluation import EvalSummary, FoldResult, run_loso, summarize
from .models import ModelSpec, build_model
from .stats import compare_models
from .tensor import Tensor, precision
from .training import TrainConfig, fit

__version__ = "0.1.0"
