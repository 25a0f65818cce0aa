"""
Core utilities and configuration for the model-free bounds solver.
"""
