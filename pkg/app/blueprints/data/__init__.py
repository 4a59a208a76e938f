from .commands import data_bp
__all__ = ['data_bp']
