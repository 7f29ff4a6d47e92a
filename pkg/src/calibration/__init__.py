# Pre-rank calibration library
