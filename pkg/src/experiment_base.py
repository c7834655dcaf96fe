"""
Base experiment module for the Slow SDE Laboratory.
Provides a common lifecycle, cell scheduling and assertion bookkeeping for
every harness experiment.
"""

import asyncio
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from stats import Estimate

logger = logging.getLogger(__name__)


@dataclass
class Assertion:
    """One asserted comparison: both sides and the tolerance used."""

    name: str
    target: str
    observed: float
    tolerance: str
    passed: bool


@dataclass
class Report:
    """Summary statistics, fits, assertions and raw samples of one experiment."""

    experiment: str
    model: str
    seed: int
    rows: List[dict] = field(default_factory=list)
    fits: List[Estimate] = field(default_factory=list)
    assertions: List[Assertion] = field(default_factory=list)
    samples: Dict[str, np.ndarray] = field(default_factory=dict)
    series: Dict[str, tuple] = field(default_factory=dict)
    notices: List[str] = field(default_factory=list)

    @property
    def passed(self):
        return all(a.passed for a in self.assertions)

    @property
    def failures(self):
        return [a for a in self.assertions if not a.passed]


class ExperimentBase(ABC):
    """Base class for all harness experiments."""

    def __init__(self, cfg, threads=1, name="BaseExperiment"):
        """Initialize the experiment with its configuration and thread cap."""
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self.name = name
        self.running = False
        self.task = None
        self.report = None

    async def start(self):
        """Start the experiment task."""
        if self.running:
            logger.warning(f"{self.name} is already running")
            return

        self.running = True
        self.task = asyncio.create_task(self._run_experiment())
        logger.info(f"{self.name} started")

    async def run(self):
        """Run to completion and return the Report."""
        await self.start()
        try:
            self.report = await self.task
        finally:
            self.running = False
            self.task = None
        logger.info(f"{self.name} finished: {len(self.report.assertions) - len(self.report.failures)}"
                    f"/{len(self.report.assertions)} assertions passed")
        return self.report

    @abstractmethod
    async def _run_experiment(self):
        """Produce the Report. To be implemented by subclasses."""
        pass

    async def run_cells(self, fn, cells):
        """
        Evaluate fn(cell) for every cell in worker threads, at most
        self.threads at a time; results come back in cell order.
        """
        semaphore = asyncio.Semaphore(self.threads)

        async def run_one(index, cell):
            async with semaphore:
                logger.debug(f"{self.name}: cell {index} started")
                return index, await asyncio.to_thread(fn, cell)

        results = await asyncio.gather(*(run_one(i, c) for i, c in enumerate(cells)))
        return [value for _, value in sorted(results, key=lambda pair: pair[0])]

    def check(self, report, name, passed, target, observed, tolerance=""):
        """Record an assertion on the report and log its outcome."""
        observed = float(observed) if observed is not None else math.nan
        assertion = Assertion(name, str(target), observed, str(tolerance), bool(passed))
        report.assertions.append(assertion)
        if assertion.passed:
            logger.info(f"{self.name}: PASS {name} (observed {observed:.6g}, target {target})")
        else:
            logger.warning(f"{self.name}: FAIL {name} (observed {observed:.6g}, target {target})")
        return assertion

    def check_range(self, report, name, observed, low, high):
        return self.check(report, name, low <= observed <= high, f"[{low:g}, {high:g}]", observed,
                          f"range [{low:g}, {high:g}]")

    def notice(self, report, message):
        report.notices.append(message)
        logger.warning(f"{self.name}: {message}")
