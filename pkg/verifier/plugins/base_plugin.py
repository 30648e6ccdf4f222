import logging
from typing import Optional

logger = logging.getLogger(__name__)

CONDITION_TIERS = (None, "c1", "c2", "c2a")


class SuitePlugin:
    """Base class for verification suites.

    A suite declares the condition tier its checks depend on; ``run_suite`` refuses to
    execute it on parameters failing that tier.
    """

    def __init__(self, name: str, requires: Optional[str] = None, description: str = ""):
        if requires not in CONDITION_TIERS:
            raise ValueError(f"unknown condition tier {requires!r}")
        self.name = name
        self.requires = requires
        self.description = description

    def run(self, context) -> list:
        raise NotImplementedError(f"suite '{self.name}' does not implement run()")

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, requires={self.requires!r})"
