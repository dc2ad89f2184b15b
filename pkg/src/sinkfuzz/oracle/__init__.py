"""Oracle backends standing in for the reasoning agents.

Every backend exposes ``ask(OracleRequest) -> OracleResponse`` and a
``usage`` counter object; failures raise :class:`OracleError`.
"""

from .dsl import DSLError, GeneratorProgram, parse_generator, run_generator
from .heuristic import HeuristicOracle
from .replay import ReplayOracle, TranscriptExhausted
from .types import (EXPLOIT, EXPLORE, FILTER, OracleError, OracleRequest, OracleResponse,
                    UsageCounters)


def make_oracle(spec: str, params=None):
    """Build a backend from a CLI-style spec: ``heuristic``, ``replay:FILE`` or ``remote``."""
    if spec == "heuristic":
        return HeuristicOracle()
    if spec.startswith("replay:"):
        return ReplayOracle.load(spec.split(":", 1)[1])
    if spec == "remote":
        from .remote import EndpointConfig, RemoteOracle
        return RemoteOracle(EndpointConfig.from_dict(params or {}))
    raise ValueError(f"unknown oracle {spec!r} (expected heuristic, replay:FILE or remote)")


__all__ = [
    "DSLError", "EXPLOIT", "EXPLORE", "FILTER", "GeneratorProgram", "HeuristicOracle",
    "OracleError", "OracleRequest", "OracleResponse", "ReplayOracle", "TranscriptExhausted",
    "UsageCounters", "make_oracle", "parse_generator", "run_generator",
]
