"""
Simulated-observer visual acuity.

Zernike wavefront -> PSF -> blurred Landolt C -> CNN observer -> BestPEST
staircase -> logMAR, plus defocus sweeps, progressive-lens acuity maps and
Bland-Altman agreement.
"""
__version__ = "0.1.0"
