# Pre-rank calibration for multi-output probabilistic regression
__version__ = "0.1.0"
