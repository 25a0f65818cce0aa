"""
Data models: markets, payoffs, instruments, training and oracle results, run configs.
"""
