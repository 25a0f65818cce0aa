"""
Test suite for the model-free bounds solver.
"""
