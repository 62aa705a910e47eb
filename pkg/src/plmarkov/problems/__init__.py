"""Concrete optimization problems driven by Markovian data streams.

Each submodule builds a :class:`~plmarkov.problems.base.ProblemInstance`
whose curvature, noise, and mixing constants are certified (or explicitly
flagged as estimates) so the verification harness can check the theory
against simulation.  :func:`build_instance` dispatches a config mapping to
the right builder by its ``kind`` key.
"""

from typing import Callable, Mapping

from plmarkov.errors import InvalidConfig
from plmarkov.problems.base import (
    ChainPathNoise,
    NoiseModel,
    ProblemConstants,
    ProblemInstance,
)
from plmarkov.problems.quadratic import build_quadratic_instance
from plmarkov.problems.subsample import build_subsample_instance
from plmarkov.problems.sysid import build_sysid_instance
from plmarkov.problems.token import build_token_instance

__all__ = [
    "ChainPathNoise",
    "NoiseModel",
    "ProblemConstants",
    "ProblemInstance",
    "PROBLEM_BUILDERS",
    "build_instance",
    "build_quadratic_instance",
    "build_subsample_instance",
    "build_sysid_instance",
    "build_token_instance",
]

PROBLEM_BUILDERS: dict[str, Callable[[Mapping], ProblemInstance]] = {
    "token": build_token_instance,
    "subsample": build_subsample_instance,
    "sysid": build_sysid_instance,
    "quadratic": build_quadratic_instance,
}


def build_instance(config: Mapping) -> ProblemInstance:
    """Build the problem instance described by ``config["kind"]``.

    The remaining keys are forwarded to the family's builder; unknown or
    missing kinds raise :class:`~plmarkov.errors.InvalidConfig`.
    """
    kind = config.get("kind")
    if kind not in PROBLEM_BUILDERS:
        known = ", ".join(sorted(PROBLEM_BUILDERS))
        raise InvalidConfig(f"unknown problem kind {kind!r}; expected one of: {known}")
    return PROBLEM_BUILDERS[kind](config)
