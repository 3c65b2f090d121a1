"""Numerical toolkit for Q-valued functions: the space A_q(R^m), grid fields,
frequency and Weiss quantities, discrete minimizers and blow-up analysis."""

__version__ = "0.1.0"
