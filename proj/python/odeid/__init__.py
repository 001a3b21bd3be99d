"""Observability and identifiability analysis for nonlinear ODE models.

Thin convenience wrapper over the compiled core: analysis results come back
as plain dictionaries.
"""

import json

from ._core import (
    ModelValidationError,
    ExprSyntaxError,
    builtin_models,
    parse_expr,
    differentiate_expr,
    evaluate_expr,
    is_zero_expr,
    analyze_json,
    indist_json,
)

__all__ = [
    "ModelValidationError",
    "ExprSyntaxError",
    "builtin_models",
    "parse_expr",
    "differentiate_expr",
    "evaluate_expr",
    "is_zero_expr",
    "analyze",
    "indistinguishable",
]

__version__ = "0.1.0"


def analyze(model, seed=0x77003, trials=5):
    """Full analysis of a builtin name or model JSON document -> dict."""
    return json.loads(analyze_json(model, seed, trials))


def indistinguishable(model, scenario="", sym_index=1, taus=(-1.0, 0.0, 1.0), tol=1e-5,
                      seed=0x77003):
    """Certify output invariance along a state symmetry flow -> dict."""
    return json.loads(indist_json(model, scenario, sym_index, list(taus), tol, seed))
