"""
Checking the end-to-end gradient
================================

The tape gradient of the loss with respect to every encoder weight is
compared with central differences on a 30-point pair.
"""
from bevcontrast.contrast import AlignMode
from bevcontrast.gradcheck import gradcheck

for mode in AlignMode:
    err, n_checked, n_skipped = gradcheck(seed=0, mode=mode, hidden=8, dim=4)
    print(f"{mode.value:12s} max relative error {err:.2e} over {n_checked} weights ({n_skipped} at ReLU kinks)")
