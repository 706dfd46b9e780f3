"""sohcast: transfer learning for battery state-of-health forecasting.

Subpackages cover the full pipeline: virtual-cell data generation
(`cellsim`), windowing and domain splits (`dataset`), a from-scratch
LSTM encoder-decoder (`network`), MMD-based domain adaptation with
leave-one-batch-out tuning (`adapt`), split conformal intervals
(`conformal`), and a config-driven command line (`cli`).
"""

__version__ = "0.1.0"
