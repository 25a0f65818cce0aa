"""
In-memory stores for priced instruments.
"""
