"""
Detector package: diffusion backbone, fusion, heads, dual-branch training and transfer.
"""
