# DECOLA desk-scale open-vocabulary detection

__version__ = "1.0.0"
