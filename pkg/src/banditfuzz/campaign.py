"""Campaign orchestration: seed loading, the main fuzzing loop, stats and model lifecycle."""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import policy
from .corpus import OutputDir, Queue, TestCase
from .coverage import CoverageMap, hash_trace
from .executor import DEFAULT_TIMEOUT_MS, TargetAdapter, Verdict, resolve_target, run_target
from .scheduler import ACTIONS, EnergyDecision, Mode, SchedulerConfig, fuzz_one

log = logging.getLogger(__name__)

PLOT_HEADER = ["unix_ms", "execs", "paths_total", "virgin_bytes_covered",
               "crashes_unique", "hangs_unique", "pending_favored"]
REWARD_HEADER = ["decision_index", "action_index", "multiplier", "base_energy", "final_energy",
                 "interesting", "total", "reward", "explored"]

# virtual-clock charge per execution on top of the target's own cost
VIRTUAL_EXEC_OVERHEAD_US = 100


class StartupError(Exception):
    """Bad configuration or inputs; nothing was fuzzed."""


class CampaignFatal(RuntimeError):
    """The campaign cannot continue."""


class _Stop(Exception):
    pass


@dataclass
class CampaignConfig:
    input_dir: Path
    output_dir: Path
    target: str | TargetAdapter
    mode: Mode = Mode.BASELINE
    skip_deterministic: bool = False
    duration: float | None = None
    fuzzing_prob: float = 0.4
    epsilon: float = 0.1
    learning_rate: float = 0.001
    model_path: Path | None = None
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    rng_seed: int = 0
    max_execs: int | None = None
    stop_on_crash: bool = False
    virtual_clock: bool = False
    stats_interval: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_dir = Path(self.input_dir)
        self.output_dir = Path(self.output_dir)
        self.mode = Mode(self.mode)
        if self.model_path is not None:
            self.model_path = Path(self.model_path)

    def validate(self) -> None:
        if self.timeout_ms <= 0:
            raise StartupError("timeout must be positive")
        if self.duration is not None and self.duration <= 0:
            raise StartupError("duration must be positive")
        if self.mode is Mode.TRAIN:
            if self.model_path is None:
                raise StartupError("train mode needs --model <path> to save the trained policy")
            parent = self.model_path.parent
            if not parent.is_dir():
                raise StartupError(f"model directory {parent} does not exist")
        if self.mode is Mode.TEST:
            if self.model_path is None or not self.model_path.is_file():
                raise StartupError("test mode needs an existing --model file")
        try:
            SchedulerConfig(self.fuzzing_prob, self.epsilon, self.mode, self.skip_deterministic)
        except ValueError as exc:
            raise StartupError(str(exc)) from exc


class Campaign:
    """One fuzzing run. Drives :func:`fuzz_one` and owns every piece of mutable state."""

    def __init__(self, config: CampaignConfig):
        config.validate()
        self.config = config
        self.rng = random.Random(config.rng_seed)
        self.scheduler = SchedulerConfig(
            fuzzing_prob=config.fuzzing_prob,
            epsilon=config.epsilon,
            mode=config.mode,
            # no deterministic stage in bandit modes
            skip_deterministic=config.skip_deterministic or config.mode is not Mode.BASELINE,
        )
        try:
            self.target = (config.target if isinstance(config.target, TargetAdapter)
                           else resolve_target(config.target))
        except ValueError as exc:
            raise StartupError(str(exc)) from exc
        self.output = OutputDir(config.output_dir)
        self.queue = Queue(self.output)
        self.coverage = CoverageMap()
        self.model = None
        self.execs = 0
        self.decisions = 0
        self.first_crash_exec: int | None = None
        self._vclock_us = 0
        self._wall_start = 0.0
        self._last_stats = None
        self._plot = None
        self._rewards = None

    # -- clock ------------------------------------------------------------------------

    def elapsed(self) -> float:
        if self.config.virtual_clock:
            return self._vclock_us / 1e6
        return time.monotonic() - self._wall_start

    def _unix_ms(self) -> int:
        if self.config.virtual_clock:
            return self._vclock_us // 1000
        return int(time.time() * 1000)

    # -- execution --------------------------------------------------------------------

    def _run(self, data: bytes):
        try:
            res = run_target(self.target, data, self.config.timeout_ms, self.config.virtual_clock)
        except Exception as exc:
            raise CampaignFatal(str(exc)) from exc
        self.execs += 1
        if self.config.virtual_clock:
            self._vclock_us += res.exec_us + VIRTUAL_EXEC_OVERHEAD_US
        return res

    def execute(self, data: bytes, parent: TestCase) -> bool:
        res = self._run(data)
        classified, verdict = self.coverage.observe(res.raw_trace, res.edges)
        added = False
        if res.verdict is Verdict.OK:
            added = self.queue.add_if_interesting(data, res.exec_us, classified, verdict, parent)
        else:
            kind = "crashes" if res.verdict is Verdict.CRASH else "hangs"
            self.output.save_fault(kind, data, hash_trace(classified))
            if res.verdict is Verdict.CRASH and self.first_crash_exec is None:
                self.first_crash_exec = self.execs
        self._tick()
        return added

    def _tick(self) -> None:
        if self.elapsed() - self._last_stats >= self.config.stats_interval:
            self.emit_stats()
        c = self.config
        if c.stop_on_crash and self.first_crash_exec is not None:
            raise _Stop
        if c.max_execs is not None and self.execs >= c.max_execs:
            raise _Stop
        if c.duration is not None and self.elapsed() >= c.duration:
            raise _Stop

    # -- stats ---------------------------------------------------------------------------

    def emit_stats(self) -> None:
        self._last_stats = self.elapsed()
        self._plot.writerow([
            self._unix_ms(), self.execs, len(self.queue), self.coverage.virgin_bytes_covered,
            self.output.crashes_unique, self.output.hangs_unique, self.queue.pending_favored,
        ])
        self._plot_file.flush()

    def _log_decision(self, d: EnergyDecision) -> None:
        self._rewards.writerow([
            self.decisions, d.action_index, ACTIONS[d.action_index], d.base_energy,
            d.final_energy, d.interesting, d.total, repr(d.reward), int(d.explored),
        ])
        self._rewards_file.flush()
        self.decisions += 1

    # -- lifecycle -------------------------------------------------------------------------

    def _load_seeds(self) -> list[tuple[str, bytes]]:
        d = self.config.input_dir
        if not d.is_dir():
            raise StartupError(f"input directory {d} does not exist")
        seeds = []
        for p in sorted(d.iterdir()):
            if p.is_file() and not p.name.startswith("."):
                try:
                    seeds.append((p.name, p.read_bytes()))
                except OSError as exc:
                    raise StartupError(f"cannot read seed {p}: {exc}") from exc
        if not seeds:
            raise StartupError(f"no seed files in {d}")
        self.rng.shuffle(seeds)
        return seeds

    def _setup_model(self) -> None:
        c = self.config
        if c.mode is Mode.BASELINE:
            return
        if c.model_path is not None and c.model_path.is_file():
            try:
                self.model = policy.load(c.model_path, learning_rate=c.learning_rate)
            except (OSError, ValueError) as exc:
                raise StartupError(f"cannot load model: {exc}") from exc
        else:
            self.model = policy.LSTMPolicy(learning_rate=c.learning_rate,
                                           random_state=self.rng.getrandbits(64)).initialize()

    def _open_logs(self) -> None:
        root = self.config.output_dir
        self._plot_file = open(root / "plot_data.csv", "w", newline="")
        self._plot = csv.writer(self._plot_file, lineterminator="\n")
        self._plot.writerow(PLOT_HEADER)
        if self.config.mode is Mode.TRAIN:
            self._rewards_file = open(root / "reward_log.csv", "w", newline="")
            self._rewards = csv.writer(self._rewards_file, lineterminator="\n")
            self._rewards.writerow(REWARD_HEADER)

    def _close_logs(self) -> None:
        for f in (getattr(self, "_plot_file", None), getattr(self, "_rewards_file", None)):
            if f is not None:
                f.close()

    def _dry_run(self, seeds) -> None:
        for name, data in seeds:
            res = self._run(data)
            if res.verdict is not Verdict.OK:
                raise StartupError(f"seed {name!r} causes a {res.verdict.value}; "
                                   "remove it or replace it with a benign input")
            classified, _ = self.coverage.observe(res.raw_trace, res.edges)
            self.queue.add(data, res.exec_us, classified, depth=0)

    def _main_loop(self) -> None:
        q = self.queue
        while True:
            q.cull()
            i = 0
            while i < len(q):
                tc = q.entries[i]
                i += 1
                if q.should_skip(tc, self.rng):
                    if self.config.virtual_clock:
                        self._vclock_us += 1
                    self._tick()
                    continue
                decision = fuzz_one(tc, self.scheduler, self.model, self)
                if decision is not None and self.config.mode is Mode.TRAIN:
                    self._log_decision(decision)
                q.mark_fuzzed(tc)

    def run(self) -> dict:
        """Run to completion and return the summary (also written to summary.json)."""
        seeds = self._load_seeds()
        try:
            self.output.create()
        except (FileExistsError, OSError) as exc:
            raise StartupError(str(exc)) from exc
        self._setup_model()
        self._wall_start = time.monotonic()
        self._open_logs()
        try:
            self._dry_run(seeds)
            self.emit_stats()
            try:
                self._main_loop()
            except (_Stop, KeyboardInterrupt):
                pass
            self.emit_stats()
        finally:
            self._close_logs()
            if self.config.mode is Mode.TRAIN and self.model is not None:
                policy.save(self.model, self.config.model_path)
        summary = self.summary()
        (self.config.output_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return summary

    def summary(self) -> dict:
        return {
            "execs": self.execs,
            "paths_total": len(self.queue),
            "crashes_unique": self.output.crashes_unique,
            "hangs_unique": self.output.hangs_unique,
            "virgin_bytes_covered": self.coverage.virgin_bytes_covered,
            "first_crash_exec": self.first_crash_exec,
            "bandit_decisions": self.decisions,
            "elapsed_s": round(self.elapsed(), 3),
        }


def run_campaign(config: CampaignConfig) -> dict:
    return Campaign(config).run()
