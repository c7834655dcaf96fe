"""
Command handler module for the Slow SDE Laboratory.
Dispatches the run, sde, compare, moments, sweep and verify commands and
maps their outcome to an exit code.
"""

import asyncio
import logging
import os
from dataclasses import replace

import numpy as np

from config import Config
from config_parser import ResolvedConfig, with_run_value, write_resolved_config
from emitters import emit_csv, emit_table_csv, emit_trajectory_svg
from exceptions import ConfigError, LeftBasinError, SlowSdeError
from harness import COMPARE_EXPERIMENTS, make_experiment, run_acceptance
from manifold import NULL_MARKER, gf_project
from models import build_model
from optim import run_local_sgd, run_parallel_sgd, run_post_local_sgd
from slowsde import integrate_slow_sde
from streams import NoiseStreams

logger = logging.getLogger(__name__)

RUNNERS = {
    "parallel": run_parallel_sgd,
    "local": run_local_sgd,
    "post_local": run_post_local_sgd,
}


class CommandHandler:
    """Runs one command against a resolved configuration."""

    def __init__(self, db_manager, reporter, resolved: ResolvedConfig, threads=1):
        """Initialize the command handler."""
        self.db_manager = db_manager
        self.reporter = reporter
        self.resolved = resolved
        self.threads = max(1, int(threads))
        self.output_dir = resolved.output
        self.run_id = None
        self.commands = {
            'run': self.cmd_run,
            'sde': self.cmd_sde,
            'compare': self.cmd_compare,
            'moments': self.cmd_moments,
            'sweep': self.cmd_sweep,
            'verify': self.cmd_verify,
        }

    def _experiment_name(self, command):
        if command in ("compare", "moments"):
            return "moments" if command == "moments" else self.resolved.harness.experiment
        if command == "run":
            return self.resolved.run.algorithm
        if command == "sde":
            return self.resolved.sde.kind
        return None

    def _seed(self, command):
        if command in ("compare", "moments", "verify"):
            return self.resolved.harness.seed
        if command in ("run", "sweep"):
            return self.resolved.run.seed
        return self.resolved.seed

    async def handle(self, command):
        """Execute a command; returns the process exit code."""
        if command not in self.commands:
            logger.error(f"Unknown command: {command}")
            return Config.EXIT_CONFIG_ERROR

        os.makedirs(self.output_dir, exist_ok=True)
        config_path = write_resolved_config(self.resolved, self.output_dir)
        if self.db_manager is not None:
            self.run_id = await self.db_manager.start_run(
                command, self._experiment_name(command), self.resolved.model.name, self._seed(command),
                self.resolved.to_json()
            )
            if config_path:
                await self.db_manager.add_artifact(self.run_id, config_path, "json")

        status, code = "error", Config.EXIT_RUNTIME_FAILURE
        try:
            code = await self.commands[command]()
            status = {Config.EXIT_OK: "passed", Config.EXIT_ASSERTION_FAILED: "failed"}.get(code, "error")
        except ConfigError as e:
            logger.error(f"Configuration error in {command}: {e}")
            code = Config.EXIT_CONFIG_ERROR
        except SlowSdeError as e:
            logger.error(f"Error executing command {command}: {e}")
        except Exception as e:
            logger.error(f"Unexpected error executing command {command}: {e}")
        finally:
            if self.db_manager is not None and self.run_id is not None:
                await self.db_manager.finish_run(self.run_id, status)
                await self.summarize_run()
        return code

    async def summarize_run(self):
        """One line on what the ledger holds for the current run; None without a ledger."""
        if self.db_manager is None or self.run_id is None:
            return None
        run = await self.db_manager.get_run(self.run_id)
        if run is None:
            return None
        artifacts = await self.db_manager.get_artifacts(self.run_id)
        failed = await self.db_manager.get_assertions(self.run_id, failed_only=True)
        summary = f"Run {self.run_id} ({run['command']}): {run['status']}, {len(artifacts)} artifact(s) recorded"
        if failed:
            summary += "; failed: " + ", ".join(a["name"] for a in failed)
        logger.info(summary)
        self.reporter.show(summary)
        return summary

    async def _artifact(self, path, kind):
        if self.db_manager is not None and self.run_id is not None:
            await self.db_manager.add_artifact(self.run_id, path, kind)

    def _start_point(self, model):
        theta0 = self.resolved.run.theta0 or self.resolved.model.theta0
        return None if theta0 is None else np.asarray(theta0, dtype=float)

    async def _write_trajectory(self, record, stem):
        csv_path = emit_csv(record, os.path.join(self.output_dir, f"{stem}.csv"))
        await self._artifact(csv_path, "csv")
        if len(record):
            svg_path = emit_trajectory_svg(record, os.path.join(self.output_dir, f"{stem}.svg"), title=stem)
            await self._artifact(svg_path, "svg")
        return csv_path

    async def cmd_run(self):
        """Run run.algorithm and write its trajectory."""
        cfg = self.resolved.run
        model = build_model(self.resolved.model)
        runner = RUNNERS[cfg.algorithm]
        record = await asyncio.to_thread(runner, model, cfg, NoiseStreams(cfg.seed), self._start_point(model))
        await self._write_trajectory(record, f"{cfg.algorithm}_{model.name}")
        if record.metadata.get("diverged"):
            logger.warning(f"{cfg.algorithm} run diverged; trajectory truncated")
        self.reporter.show(f"{cfg.algorithm}: {len(record)} records, α = {cfg.alpha:g}, "
                           f"final loss {record.loss[-1]:.6g}" if len(record) else f"{cfg.algorithm}: no records")
        return Config.EXIT_OK

    async def cmd_sde(self):
        """Integrate sde.kind from sde.zeta0 (or the projection of the start point)."""
        spec, run = self.resolved.sde, self.resolved.run
        model = build_model(self.resolved.model)
        kind = spec.build(run)
        if spec.zeta0 is not None:
            zeta0 = np.asarray(spec.zeta0, dtype=float)
        else:
            start = self._start_point(model)
            zeta0 = gf_project(model, model.default_start() if start is None else start)
            if zeta0 is NULL_MARKER:
                raise LeftBasinError("the start point does not project onto the manifold")
        record = await asyncio.to_thread(integrate_slow_sde, model, kind, zeta0, spec.horizon, spec.dt,
                                         NoiseStreams(self.resolved.seed), spec.record_every)
        await self._write_trajectory(record, f"sde_{spec.kind}_{model.name}")
        self.reporter.show(f"{type(kind).__name__}: ζ(T) = {record.thetas[-1]}, "
                           f"tr ∇²L = {record.tr_hess[-1]:.6g}")
        return Config.EXIT_OK

    async def _experiment(self, harness):
        report = await make_experiment(harness, self.threads).run()
        await self.reporter.publish(report, self.run_id, self.output_dir)
        return Config.EXIT_OK if report.passed else Config.EXIT_ASSERTION_FAILED

    async def cmd_compare(self):
        """Run harness.experiment."""
        harness = self.resolved.harness
        if harness.experiment not in COMPARE_EXPERIMENTS:
            raise ConfigError(f"compare runs one of {', '.join(COMPARE_EXPERIMENTS)}; got {harness.experiment}",
                              key="harness.experiment")
        return await self._experiment(harness)

    async def cmd_moments(self):
        return await self._experiment(replace(self.resolved.harness, experiment="moments"))

    async def cmd_sweep(self):
        """Repeat `run` with sweep.key set to each of sweep.values."""
        sweep = self.resolved.sweep
        if not sweep.values:
            raise ConfigError("sweep.values is empty", key="sweep.values")
        model = build_model(self.resolved.model)
        rows = []
        for value in sweep.values:
            cfg = with_run_value(self.resolved, sweep.key, value).run
            record = await asyncio.to_thread(RUNNERS[cfg.algorithm], model, replace(cfg, project=True),
                                             NoiseStreams(cfg.seed), self._start_point(model))
            await self._write_trajectory(record, f"sweep_{sweep.key}={value}_{model.name}")
            last = len(record) - 1
            rows.append({
                sweep.key: value,
                "alpha": cfg.alpha,
                "steps": cfg.steps,
                "records": len(record),
                "diverged": bool(record.metadata.get("diverged")),
                "final_loss": float(record.loss[last]) if last >= 0 else float("nan"),
                "final_dist": float(record.dist[last]) if last >= 0 else float("nan"),
                "final_tr_hess": float(record.tr_hess[last]) if last >= 0 else float("nan"),
            })
        path = emit_table_csv(rows, os.path.join(self.output_dir, f"sweep_{sweep.key}_{model.name}.csv"))
        await self._artifact(path, "csv")
        self.reporter.show(f"Sweep over {sweep.key}: {len(rows)} runs written to {path}")
        return Config.EXIT_OK

    async def cmd_verify(self):
        """Run the acceptance suite at verify.scale."""
        results = await run_acceptance(self.resolved.harness, self.resolved.verify.scale, self.threads)
        directory = os.path.join(self.output_dir, "verify")
        for criterion, report in results:
            await self.reporter.publish(report, self.run_id, directory)
        table = self.reporter.format_verify_table(results)
        print(table)
        all_passed = all(report.passed for _, report in results)
        return Config.EXIT_OK if all_passed else Config.EXIT_ASSERTION_FAILED
