"""Sound-field translation: analytic translation matrices, ridge inverse and TT-Net."""
