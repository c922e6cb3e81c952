# Transient stability boundary generation and online security monitoring

__version__ = "1.0.0"
