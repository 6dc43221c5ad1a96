"""
ActVAR Lab - Dispersión dual para transformers autorregresivos por escalas
Enrutado de expertos en la FFN, activación de tokens por bloque, destilación en dos fases y FLOPs
"""

__version__ = "1.0.0"
__author__ = "ActVAR Lab Team"
