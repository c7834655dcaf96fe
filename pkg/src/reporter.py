"""
Reporter module for the Slow SDE Laboratory.
Formats experiment reports as text summaries and the verify table, writes
their CSV and SVG artifacts, and records everything in the results ledger.
"""

import logging
import math
import os
from datetime import datetime, timezone

from config import Config
from emitters import emit_report_csv, emit_report_svgs

logger = logging.getLogger(__name__)


def _short(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


class Reporter:
    """Turns Reports into files on disk and rows in the ledger."""

    def __init__(self, db_manager, output_dir, quiet=False):
        """Initialize the reporter with the ledger and the output directory."""
        self.db_manager = db_manager
        self.output_dir = output_dir
        self.quiet = quiet
        self.report_template = Config.REPORT_TEMPLATE

    @staticmethod
    def timestamp():
        return datetime.now(timezone.utc).strftime(Config.TIMESTAMP_FORMAT)

    def format_report(self, report, created=None):
        """Fill the report template; never raises."""
        try:
            fits = "\n".join(
                Config.FIT_TEMPLATE.format(name=f.name, estimate=f.estimate, low=f.low, high=f.high)
                for f in report.fits
            ) or "  none"
            notices = "\n".join(f"  - {n}" for n in report.notices) or "  none"
            message = self.report_template.format(
                experiment=report.experiment,
                model=report.model,
                seed=report.seed,
                time=created or self.timestamp(),
                n_rows=len(report.rows),
                fits=fits,
                n_passed=len(report.assertions) - len(report.failures),
                n_assertions=len(report.assertions),
                assertions=self.format_table(report.assertions),
                notices=notices,
            )
            return message.strip() + "\n"
        except Exception as e:
            logger.error(f"Error formatting report: {e}")
            return f"Report formatting error: {e}\n"

    def format_table(self, assertions):
        """One line per assertion: status, name, target, observed, tolerance."""
        lines = []
        for a in assertions:
            lines.append(Config.ASSERTION_ROW_TEMPLATE.format(
                status="PASS" if a.passed else "FAIL",
                name=a.name,
                target=a.target,
                observed=_short(a.observed),
                tolerance=a.tolerance,
            ))
        return "\n".join(lines) if lines else "  none"

    def format_verify_table(self, results):
        """The verify table over (criterion, Report) pairs."""
        blocks = []
        for criterion, report in results:
            status = "PASS" if report.passed else "FAIL"
            blocks.append(f"[{status}] criterion {criterion}")
            blocks.append(self.format_table(report.assertions))
            blocks.extend(f"  notice: {n}" for n in report.notices)
        failed = sum(1 for _, r in results if not r.passed)
        blocks.append(f"{len(results) - failed}/{len(results)} criteria passed")
        return "\n".join(blocks)

    def write_summary(self, report, directory=None, stamp=None):
        """Write {experiment}_{model}_{timestamp}.txt; returns the path or None."""
        try:
            directory = directory or self.output_dir
            stamp = stamp or self.timestamp()
            os.makedirs(directory, exist_ok=True)
            path = os.path.join(directory, f"{report.experiment}_{report.model}_{stamp}.txt")
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(self.format_report(report, created=stamp))
            logger.info(f"Wrote summary {path}")
            return path
        except Exception as e:
            logger.error(f"Error writing summary: {e}")
            return None

    def show(self, text):
        if not self.quiet:
            print(text)

    async def record(self, run_id, report, artifacts):
        """Store assertions and artifact paths under the run; returns success."""
        if self.db_manager is None or run_id is None:
            return False
        ok = await self.db_manager.add_assertions(run_id, report.assertions)
        for path, kind in artifacts:
            ok = await self.db_manager.add_artifact(run_id, path, kind) and ok
        return ok

    async def publish(self, report, run_id=None, directory=None):
        """Write CSV, SVG and text summary of a report and record them; returns the artifact list."""
        directory = directory or self.output_dir
        stamp = self.timestamp()
        stem = f"{report.experiment}_{report.model}_{stamp}"
        artifacts = []
        try:
            artifacts.append((emit_report_csv(report, os.path.join(directory, f"{stem}.csv")), "csv"))
            artifacts.extend((path, "svg") for path in emit_report_svgs(report, directory, stem))
        except Exception as e:
            logger.error(f"Error writing artifacts for {report.experiment}: {e}")
        summary = self.write_summary(report, directory, stamp)
        if summary:
            artifacts.append((summary, "txt"))
        self.show(self.format_report(report, created=stamp))
        await self.record(run_id, report, artifacts)
        return artifacts
