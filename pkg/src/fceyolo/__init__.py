"""YOLOv8 with Feature Context Excitation blocks, on a small numpy autodiff engine."""
__version__ = "0.1.0"
