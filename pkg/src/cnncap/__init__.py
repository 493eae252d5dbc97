"""2-D interconnect capacitance modeling toolkit.

Pipeline: tech description -> random cross-section patterns -> FDM field
solver labels -> grid-density encoding -> CNN / MLP regressors -> error
metrics and 2.5-D crossover assembly.
"""

from . import assembly25d, evalkit, fieldsolver, gridrep, models, patgen, techmodel, trainer

__all__ = [
    "assembly25d", "evalkit", "fieldsolver", "gridrep", "models",
    "patgen", "techmodel", "trainer",
]

__version__ = "0.1.0"
