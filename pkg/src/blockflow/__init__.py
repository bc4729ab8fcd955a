"""Block-diagram simulation with algebraic-loop solving, control synthesis,
an autofocus case study, signed messaging and C code generation."""

from . import expr, graph, loopsolve, stdblocks, control, imaging  # noqa: F401
from .graph import Diagram, Executor, resolve_execution_order, validate_diagram, detect_algebraic_loops
from .stdblocks import Constant, Gain, Sum, Product, Saturation, UnitDelay, Integrator, SimplePID

__version__ = "0.1.0"

__all__ = [
    "Diagram", "Executor", "resolve_execution_order", "validate_diagram", "detect_algebraic_loops",
    "Constant", "Gain", "Sum", "Product", "Saturation", "UnitDelay", "Integrator", "SimplePID",
]
