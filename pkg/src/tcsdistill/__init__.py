"""Teacher-coach-student distillation for BEV semantic map segmentation."""
__version__ = "0.1.0"
