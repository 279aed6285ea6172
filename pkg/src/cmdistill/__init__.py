"""Teacher-student self-distillation on patch bags, built on a numpy autodiff engine."""

__version__ = "0.1.0"
