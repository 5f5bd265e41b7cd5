# Partially observed control of a stochastic heat equation.
# Modules are imported flat (python main.py, pytest with pythonpath = .).
