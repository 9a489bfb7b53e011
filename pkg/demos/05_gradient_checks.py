"""
Finite-difference gradient checks
=================================

Every differentiable primitive is checked against central differences at
random float64 inputs, then the full loss is checked end to end through a
tiny model (two parts and four parts on a 2x2 grid).

    python3 demos/05_gradient_checks.py
"""
from emae import gradcheck

print(gradcheck.format_report(gradcheck.run_op_suite(draws=3)))
print()
print(gradcheck.format_report(gradcheck.run_loss_suite(draws=2)))
