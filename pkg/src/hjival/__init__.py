"""Value-function approximation for two-player differential games with state
constraints: equilibrium trajectory generation via Pontryagin boundary-value
problems, branch-trunk neural operators trained with hybrid supervised +
PDE-residual losses, closed-loop safety evaluation, and tangent-kernel
diagnostics."""

__version__ = "0.1.0"
