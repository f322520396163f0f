"""Knowledge distillation of small decoder-only language models, on a pure-numpy autodiff engine."""

__version__ = "0.1.0"
