from .commands import training_bp
__all__ = ['training_bp']
