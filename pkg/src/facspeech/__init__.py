"""Factorial-HMM two-talker decoding toolkit.

Subpackages cover the full pipeline: synthetic corpus audio (`signal`),
the MFCC/log-mel front end (`features`), monophone GMM-HMM source models
(`acoustic`), joint-state likelihood estimators (`jointlik`), the
joint-posterior network (`dnn`), grammar-constrained joint decoding
(`decoder`), and experiment orchestration (`harness`).
"""

__version__ = "0.1.0"

from . import kernels

KERNEL_BACKEND = kernels.BACKEND
