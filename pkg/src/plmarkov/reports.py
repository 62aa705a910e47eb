"""Small result record shared by the verification routines."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CheckResult:
    """Outcome of a single inequality or identity check.

    Attributes:
        name: Short identifier of the checked property.
        passed: Whether the worst observed case satisfied the bound.
        lhs: Worst (largest) observed left-hand side.
        rhs: Bound it was compared against (for that same case).
        detail: Optional human-readable context.
    """

    name: str
    passed: bool
    lhs: float
    rhs: float
    detail: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"[{status}] {self.name}: lhs={self.lhs:.6g} rhs={self.rhs:.6g}"
        if self.detail:
            out += f" ({self.detail})"
        return out


def all_passed(results) -> bool:
    return all(r.passed for r in results)
