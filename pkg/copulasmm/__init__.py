"""copulasmm package: SMM estimation and inference for factor copula models
"""

__version__ = "0.1.0"
