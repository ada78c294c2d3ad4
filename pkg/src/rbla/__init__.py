"""Federated learning simulator for heterogeneous-rank LoRA clients.

Implements rank-based LoRA aggregation (``rbla``) next to zero-padding
(``zp``) and full fine-tune FedAvg (``fft``) baselines on an MLP trained
from scratch with numpy.
"""

__version__ = "0.1.0"
