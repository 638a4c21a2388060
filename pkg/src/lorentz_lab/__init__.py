"""Numerical laboratory for superdiffusion in the periodic Lorentz gas."""
