"""
Model-free price bounds for multi-asset options under dependence uncertainty.
"""
__version__ = "1.0.0"
__description__ = "Penalized neural dual solver with an LP oracle for model-free multi-asset option bounds."
