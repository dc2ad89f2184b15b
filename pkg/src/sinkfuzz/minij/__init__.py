"""MiniJ: the instrumentable target language."""

from .ast import FunctionDef, Literal, TargetProgram
from .catalog import SUPPORTED_CWES, builtin_catalog, is_sink, lookup
from .errors import MiniJError, MiniJRuntimeError, MiniJSyntaxError
from .interpreter import (
    DEFAULT_STEP_BUDGET,
    MAX_INPUT_SIZE,
    ExecutionTrace,
    Limits,
    SinkHit,
    Verdict,
    execute,
    stack_hash,
    value_profile_score,
)
from .parser import load_program, parse_program
from .sanitizers import RULES, SandboxState, SanitizerResult, SanitizerRule, evaluate_sanitizer, rule_for

__all__ = [
    "DEFAULT_STEP_BUDGET", "MAX_INPUT_SIZE", "RULES", "SUPPORTED_CWES",
    "ExecutionTrace", "FunctionDef", "Limits", "Literal", "MiniJError",
    "MiniJRuntimeError", "MiniJSyntaxError", "SandboxState", "SanitizerResult",
    "SanitizerRule", "SinkHit", "TargetProgram", "Verdict", "builtin_catalog",
    "evaluate_sanitizer", "execute", "is_sink", "load_program", "lookup",
    "parse_program", "rule_for", "stack_hash", "value_profile_score",
]
