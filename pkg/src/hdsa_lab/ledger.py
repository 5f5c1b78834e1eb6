"""PDE-solve accounting.

Every linear solve with the state operator (forward, adjoint, incremental,
modified incremental) increments a :class:`SolveCounter`. Solves with the
prior operator and the mass matrix are not PDE solves in this accounting.
"""
from collections import Counter
from contextlib import contextmanager

PHASES = (
    "data_generation",
    "inverse_solves",
    "lowrank",
    "hessian_inverse",
    "risk_sensitivity",
    "map_sensitivity",
    "other",
)


class SolveCounter:
    """Counts PDE solves, attributed to the phase that is active."""

    def __init__(self):
        self.total = 0
        self.by_phase = Counter()
        self._phase = "other"

    def add(self, n=1):
        self.total += n
        self.by_phase[self._phase] += n

    @property
    def current_phase(self):
        return self._phase

    @contextmanager
    def phase(self, name):
        if name not in PHASES:
            raise ValueError(f"unknown phase {name!r}")
        previous = self._phase
        self._phase = name
        try:
            yield self
        finally:
            self._phase = previous

    def snapshot(self):
        return dict(self.by_phase)

    def merge(self, counts):
        for k, v in counts.items():
            self.by_phase[k] += v
            self.total += v


def expected_costs(stats, r=None, n_theta=None, inverse_cg=None):
    """Per-sample PDE-solve counts predicted by the cost formulas.

    ``stats`` is a :class:`~hdsa_lab.newton.SolveStats` with ``L`` Newton
    steps and ``sum(I)`` CG iterations. Returns ``(expected, overhead)``:
    the formula value per phase and the documented constant each recorded
    count may differ by.

    * inverse solves: ``2L + 2 sum(I)``, plus 2 for the initial state and
      adjoint, 1 per rejected line-search trial and 1 more (the adjoint)
      per rejected gradient-test trial;
    * low-rank build: ``2r + 2``, minus 2 because the state and adjoint at
      the MAP point are reused from the inverse solve;
    * inverse-Hessian applies by CG: 2 per CG iteration.
    """
    expected = {
        "data_generation": 1,
        "inverse_solves": 2 * stats.newton_steps + 2 * stats.cg_iterations,
        "risk_sensitivity": 2,
    }
    overhead = {"inverse_solves": 2 + stats.rejected_trials + stats.rejected_gradient_trials}
    if r is not None:
        expected["lowrank"] = 2 * r + 2
        overhead["lowrank"] = -2
    if n_theta is not None:
        expected["map_sensitivity"] = 2 * n_theta
    if inverse_cg is not None:
        expected["hessian_inverse"] = 2 * inverse_cg
    return expected, overhead


class CostLedger:
    """Per-sample and aggregate PDE-solve counts, keyed by phase."""

    def __init__(self):
        self.samples = []

    def record(self, index, counts, expected, overhead=None):
        self.samples.append({
            "sample": int(index),
            "counts": dict(sorted(counts.items())),
            "expected": dict(sorted(expected.items())),
            "overhead": dict(sorted((overhead or {}).items())),
        })

    def totals(self):
        tot = Counter()
        for s in self.samples:
            tot.update(s["counts"])
        return dict(sorted(tot.items()))

    def grand_total(self):
        return sum(self.totals().values())

    def check(self):
        """``(sample, phase, recorded, expected + overhead)`` for every mismatch."""
        bad = []
        for s in self.samples:
            for phase, e in s["expected"].items():
                want = e + s["overhead"].get(phase, 0)
                got = s["counts"].get(phase, 0)
                if got != want:
                    bad.append((s["sample"], phase, got, want))
        return bad

    def to_dict(self):
        return {"per_sample": self.samples, "totals": self.totals(), "grand_total": self.grand_total()}
