from .commands import checks_bp
__all__ = ['checks_bp']
