"""Score-distillation 3D generation engine."""
