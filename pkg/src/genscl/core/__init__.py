"""Core package for genscl: configuration, models, errors and numerics."""
