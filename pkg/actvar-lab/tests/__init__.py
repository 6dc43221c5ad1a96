"""
Tests para ActVAR Lab
"""
