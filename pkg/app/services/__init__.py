"""
Numerical services: sampling, pricing, payoffs, the neural dual, the LP oracle and experiments.
"""
