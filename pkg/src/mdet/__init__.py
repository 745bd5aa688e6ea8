"""Linear-scaling maritime object detection on numpy.

Subpackages cover the numeric foundation (tape autodiff plus gradient
checking), patch tokenization, bidirectional selective state-space
blocks, background token pruning, a downsample-only feature pyramid, a
set-prediction head with Hungarian matching, a deterministic synthetic
scene generator, analytic FLOP models with a timing benchmark, and a
small training/evaluation front end.
"""

__version__ = "0.1.0"
