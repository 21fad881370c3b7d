"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DivergenceError -> 2,
OSError -> 3. Shape and domain violations inside the numeric code raise
plain ValueError.
"""
from __future__ import annotations


class ConfigError(Exception):
    """A configuration is malformed, incomplete, or internally inconsistent."""


class DivergenceError(Exception):
    """A training run produced a non-finite loss.

    Carries the step at which training broke down, the partial run log
    accumulated so far, and the most recent per-component update norms
    (useful for spike forensics).
    """

    def __init__(self, step: int, partial_log=None, update_norms=None):
        self.step = step
        self.partial_log = partial_log
        self.update_norms = dict(update_norms or {})
        norms = ", ".join(f"{k}={v:.3g}" for k, v in self.update_norms.items())
        super().__init__(
            f"non-finite loss at step {step}" + (f" (last update norms: {norms})" if norms else "")
        )

    def __reduce__(self):
        # keep the payload intact across process boundaries
        return (DivergenceError, (self.step, self.partial_log, self.update_norms))
