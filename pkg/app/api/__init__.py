"""
Command-line front end of the bounds solver.
"""
