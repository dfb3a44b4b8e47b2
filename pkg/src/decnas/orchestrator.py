"""Progressive two-stage search loop, history, and reports.

Stage one searches the pyramid genome against the evaluator (a fixed
default head is attached by trainer workers); stage two freezes the
best pyramid found and searches the head. The controller is updated by
PPO after every batch of evaluated samples. Runs are deterministic for
a given config + seed with the surrogate evaluator, checkpoint
bit-exactly at batch boundaries, and resume to the identical
continuation.

Checkpoint directory layout (``out_dir``):
  config.json      frozen config snapshot
  history.jsonl    one accepted sample per line, append-only
  cache.jsonl      evaluation cache, append-only
  checkpoint.json  controller weights + rng state + loop counters
  leaderboard_fpn.json / leaderboard_head.json   written at stage end
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import (
    DEFAULT_FEATURE_WEIGHTS,
    EvalCache,
    EvaluationError,
    ExternalEvaluator,
    SurrogateEvaluator,
    SurrogateSpec,
    WorkerPool,
    evaluate_batch,
)
from .policy import (
    PolicyState,
    PpoConfig,
    Trajectory,
    config_for_space,
    init_policy,
    ppo_update,
    sample_batch,
    state_from_dict,
    state_to_dict,
)
from .search_space import (
    ActionSequence,
    DecoderGenome,
    FpnGenome,
    FpnSpace,
    HeadGenome,
    HeadSpace,
    InvalidShareIndicesError,
    Stage,
    decode_fpn,
    decode_head,
    genome_from_dict,
    genome_hash,
    genome_to_dict,
)


class SearchAborted(RuntimeError):
    def __init__(self, message: str, out_dir: str | None = None):
        super().__init__(message)
        self.out_dir = out_dir


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class SearchConfig:
    """Every knob of a search run; JSON round-trippable with defaults."""

    out_dir: str | None = None
    stage_plan: str = "progressive"        # progressive | fpn | head
    fpn_samples: int = 2800
    head_samples: int = 600
    batch_size: int = 10
    fpn_top_k: int = 20
    head_top_k: int = 10
    evaluator: str = "surrogate"           # surrogate | external
    seed: int = 0
    checkpoint_every: int = 10             # batches between checkpoints
    fpn_blocks: int = 7
    fpn_ops: int = 5
    fpn_agg: int = 2
    head_layers: int = 6
    head_ops: int = 7
    hidden_size: int = 100
    embedding_size: int = 100
    ppo: PpoConfig = field(default_factory=PpoConfig)
    surrogate_weights: dict = field(
        default_factory=lambda: dict(DEFAULT_FEATURE_WEIGHTS))
    surrogate_noise: float = 0.0
    surrogate_cost_penalty: float = 0.0
    planted: dict | None = None            # genome dict; seed-derived if None
    worker_command: list[str] | None = None
    num_workers: int = 1
    eval_timeout: float = 600.0
    eval_iterations: int = 300
    fixed_fpn: dict | None = None          # required for stage_plan == "head"

    def __post_init__(self):
        if self.stage_plan not in ("progressive", "fpn", "head"):
            raise ValueError(f"unknown stage plan {self.stage_plan!r}")
        if self.evaluator not in ("surrogate", "external"):
            raise ValueError(f"unknown evaluator {self.evaluator!r}")
        for name in ("fpn_samples", "head_samples", "batch_size",
                     "fpn_top_k", "head_top_k", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.fpn_top_k > self.fpn_samples or self.head_top_k > self.head_samples:
            raise ValueError("top_k must not exceed the sample budget")

    def fpn_space(self) -> FpnSpace:
        return FpnSpace(self.fpn_blocks, self.fpn_ops, self.fpn_agg)

    def head_space(self) -> HeadSpace:
        return HeadSpace(self.head_layers, self.head_ops)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ppo"] = dataclasses.asdict(self.ppo)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        data = dict(data)
        ppo = data.pop("ppo", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        if isinstance(ppo, dict):
            cfg.ppo = PpoConfig(**ppo)
        return cfg


@dataclass(frozen=True)
class HistoryRecord:
    step: int
    stage: str
    genome: dict
    reward: float
    hash: str

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage,
                           "genome": self.genome, "reward": self.reward,
                           "hash": self.hash}, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "HistoryRecord":
        d = json.loads(line)
        return cls(step=d["step"], stage=d["stage"], genome=d["genome"],
                   reward=d["reward"], hash=d["hash"])


class SearchHistory:
    """Append-only record of evaluated samples plus derived leaderboards."""

    def __init__(self):
        self.records: list[HistoryRecord] = []
        self.rejected: dict[str, int] = {"fpn": 0, "head": 0}

    def append(self, rec: HistoryRecord) -> None:
        self.records.append(rec)

    def for_stage(self, stage: str) -> list[HistoryRecord]:
        return [r for r in self.records if r.stage == stage]

    def leaderboard(self, stage: str, k: int) -> list[HistoryRecord]:
        """Top-k by reward; earlier step wins ties."""
        return sorted(self.for_stage(stage),
                      key=lambda r: (-r.reward, r.step))[:k]

    def best(self, stage: str) -> HistoryRecord | None:
        board = self.leaderboard(stage, 1)
        return board[0] if board else None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(rec.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SearchHistory":
        hist = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    hist.append(HistoryRecord.from_json(line))
        return hist


def _derived_seed(*parts) -> int:
    material = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


def random_fpn_genome(rng: np.random.Generator, space: FpnSpace) -> FpnGenome:
    tokens = tuple(int(rng.integers(space.action_space_at(p)))
                   for p in range(space.seq_len))
    return decode_fpn(ActionSequence(Stage.FPN, tokens), space)


def random_head_genome(rng: np.random.Generator, space: HeadSpace) -> HeadGenome:
    ops = tuple(space.ops[int(rng.integers(space.n_ops))]
                for _ in range(space.n_layers))
    i = int(rng.integers(space.n_layers + 1))
    j = int(rng.integers(i, space.n_layers + 1))
    return HeadGenome(ops=ops, share_start=i, branch_split=j)


def random_decoder_genome(rng: np.random.Generator, fpn_space: FpnSpace,
                          head_space: HeadSpace) -> DecoderGenome:
    return DecoderGenome(fpn=random_fpn_genome(rng, fpn_space),
                         head=random_head_genome(rng, head_space))


def _planted_genome(cfg: SearchConfig) -> DecoderGenome:
    if cfg.planted is not None:
        g = genome_from_dict(cfg.planted)
        if isinstance(g, DecoderGenome):
            return g
        rng = np.random.default_rng(_derived_seed(cfg.seed, "planted"))
        if isinstance(g, FpnGenome):
            return DecoderGenome(fpn=g, head=random_head_genome(rng, cfg.head_space()))
        return DecoderGenome(fpn=random_fpn_genome(rng, cfg.fpn_space()), head=g)
    rng = np.random.default_rng(_derived_seed(cfg.seed, "planted"))
    return random_decoder_genome(rng, cfg.fpn_space(), cfg.head_space())


class _StageLoop:
    """Per-stage runtime: controller, rng, counters."""

    def __init__(self, cfg: SearchConfig, stage: str):
        self.stage = stage
        self.samples_target = cfg.fpn_samples if stage == "fpn" else cfg.head_samples
        self.samples_done = 0
        space = cfg.fpn_space() if stage == "fpn" else cfg.head_space()
        self.space = space
        self.policy = init_policy(
            config_for_space(space, cfg.hidden_size, cfg.embedding_size),
            seed=_derived_seed(cfg.seed, stage, "init"),
            stage=Stage.FPN if stage == "fpn" else Stage.HEAD)
        self.rng = np.random.default_rng(_derived_seed(cfg.seed, stage, "sample"))


class SearchRunner:
    def __init__(self, cfg: SearchConfig):
        self.cfg = cfg
        self.out_dir = Path(cfg.out_dir) if cfg.out_dir else None
        self.history = SearchHistory()
        self._history_fh = None
        self._planted = (_planted_genome(cfg) if cfg.evaluator == "surrogate"
                         else None)
        cache_path = self.out_dir / "cache.jsonl" if self.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cache = EvalCache(cache_path)
        self._pool: WorkerPool | None = None

    # -- evaluators ---------------------------------------------------------

    def _surrogate_spec(self, stage: str) -> SurrogateSpec:
        planted = self._planted.fpn if stage == "fpn" else self._planted.head
        return SurrogateSpec(planted=planted,
                             weights=dict(self.cfg.surrogate_weights),
                             noise_sigma=self.cfg.surrogate_noise,
                             cost_penalty=self.cfg.surrogate_cost_penalty,
                             noise_seed=self.cfg.seed,
                             fpn_space=self.cfg.fpn_space(),
                             head_space=self.cfg.head_space())

    def _evaluator_for(self, stage: str):
        if self.cfg.evaluator == "surrogate":
            return SurrogateEvaluator(self._surrogate_spec(stage))
        if self._pool is None:
            if not self.cfg.worker_command:
                raise EvaluationError("external evaluator needs worker_command")
            self._pool = WorkerPool(self.cfg.worker_command,
                                    num_workers=self.cfg.num_workers,
                                    timeout=self.cfg.eval_timeout)
        return ExternalEvaluator(self._pool, iterations=self.cfg.eval_iterations,
                                 seed=self.cfg.seed, stage=stage)

    # -- persistence --------------------------------------------------------

    def _write_config_snapshot(self) -> None:
        if self.out_dir:
            path = self.out_dir / "config.json"
            if not path.exists():
                path.write_text(json.dumps(self.cfg.to_dict(), indent=2,
                                           sort_keys=True) + "\n")

    def _open_history(self, keep_steps: int | None) -> None:
        """Open the history file for appending. ``keep_steps`` N keeps the
        first N steps (resume); None starts the file fresh."""
        if not self.out_dir:
            return
        path = self.out_dir / "history.jsonl"
        kept: list[HistoryRecord] = []
        if keep_steps is not None and path.exists():
            kept = [r for r in SearchHistory.load(path).records
                    if r.step < keep_steps]
        with open(path, "w", encoding="utf-8") as fh:
            for r in kept:
                fh.write(r.to_json() + "\n")
        for r in kept:
            self.history.append(r)
        self._history_fh = open(path, "a", encoding="utf-8")

    def _append_history(self, rec: HistoryRecord) -> None:
        self.history.append(rec)
        if self._history_fh:
            self._history_fh.write(rec.to_json() + "\n")
            self._history_fh.flush()

    def _checkpoint(self, stage_idx: int, loop: _StageLoop,
                    global_step: int, fixed_fpn: dict | None) -> None:
        if not self.out_dir:
            return
        data = {
            "version": 1,
            "stage_idx": stage_idx,
            "stage": loop.stage,
            "samples_done": loop.samples_done,
            "global_step": global_step,
            "rejected": dict(self.history.rejected),
            "policy": state_to_dict(loop.policy),
            "rng_state": loop.rng.bit_generator.state,
            "fixed_fpn": fixed_fpn,
        }
        tmp = self.out_dir / "checkpoint.json.tmp"
        tmp.write_text(json.dumps(data))
        os.replace(tmp, self.out_dir / "checkpoint.json")

    def _load_checkpoint(self) -> dict | None:
        if not self.out_dir:
            return None
        path = self.out_dir / "checkpoint.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def _write_leaderboard(self, stage: str, k: int) -> None:
        if not self.out_dir:
            return
        board = [{"step": r.step, "reward": r.reward, "hash": r.hash,
                  "genome": r.genome}
                 for r in self.history.leaderboard(stage, k)]
        (self.out_dir / f"leaderboard_{stage}.json").write_text(
            json.dumps(board, indent=2) + "\n")

    # -- sampling -----------------------------------------------------------

    def _decode_batch(self, loop: _StageLoop, n: int,
                      fixed_fpn: FpnGenome | None):
        """Sample n valid trajectories, resampling invalid head share
        indices without consuming history steps."""
        out: list[tuple[Trajectory, object]] = []
        while len(out) < n:
            for traj in sample_batch(loop.policy, n - len(out), loop.rng):
                try:
                    if loop.stage == "fpn":
                        genome = decode_fpn(traj.sequence(), loop.space)
                    else:
                        head = decode_head(traj.sequence(), loop.space)
                        genome = DecoderGenome(fpn=fixed_fpn, head=head)
                except InvalidShareIndicesError:
                    self.history.rejected[loop.stage] += 1
                    continue
                out.append((traj, genome))
        return out

    # -- main loop ----------------------------------------------------------

    def run(self, resume: bool = False) -> SearchHistory:
        cfg = self.cfg
        stages = {"progressive": ["fpn", "head"], "fpn": ["fpn"],
                  "head": ["head"]}[cfg.stage_plan]
        self._write_config_snapshot()

        start_stage_idx = 0
        global_step = 0
        fixed_fpn_dict = cfg.fixed_fpn
        restored_loop: _StageLoop | None = None

        ckpt = self._load_checkpoint() if resume else None
        if ckpt is not None:
            start_stage_idx = ckpt["stage_idx"]
            global_step = ckpt["global_step"]
            fixed_fpn_dict = ckpt["fixed_fpn"] or fixed_fpn_dict
            self.history.rejected.update(ckpt["rejected"])
            self._open_history(keep_steps=global_step)
            stage = stages[start_stage_idx]
            restored_loop = _StageLoop(cfg, stage)
            restored_loop.policy = state_from_dict(ckpt["policy"])
            restored_loop.rng.bit_generator.state = ckpt["rng_state"]
            restored_loop.samples_done = ckpt["samples_done"]
        else:
            self._open_history(keep_steps=None)

        try:
            for stage_idx in range(start_stage_idx, len(stages)):
                stage = stages[stage_idx]
                loop = restored_loop if (restored_loop is not None
                                         and stage_idx == start_stage_idx) \
                    else _StageLoop(cfg, stage)
                fixed_fpn = None
                if stage == "head":
                    if fixed_fpn_dict is None:
                        raise SearchAborted(
                            "head stage requires a fixed pyramid genome",
                            str(self.out_dir) if self.out_dir else None)
                    fixed_fpn = genome_from_dict({"fpn": fixed_fpn_dict["fpn"]}
                                                 if "fpn" in fixed_fpn_dict
                                                 else {"fpn": fixed_fpn_dict})
                evaluator = self._evaluator_for(stage)
                batches_since_ckpt = 0
                while loop.samples_done < loop.samples_target:
                    n = min(cfg.batch_size,
                            loop.samples_target - loop.samples_done)
                    pairs = self._decode_batch(loop, n, fixed_fpn)
                    genomes = [g for _, g in pairs]
                    try:
                        rewards = evaluate_batch(genomes, evaluator, self.cache)
                    except EvaluationError as exc:
                        self._checkpoint(stage_idx, loop, global_step,
                                         fixed_fpn_dict)
                        raise SearchAborted(
                            f"evaluator failed: {exc}",
                            str(self.out_dir) if self.out_dir else None) from exc
                    trajs = []
                    for (traj, genome), reward in zip(pairs, rewards):
                        traj.reward = reward.value
                        trajs.append(traj)
                        rec = HistoryRecord(step=global_step, stage=stage,
                                            genome=genome_to_dict(genome),
                                            reward=reward.value,
                                            hash=genome_hash(genome))
                        self._append_history(rec)
                        global_step += 1
                        loop.samples_done += 1
                    ppo_update(loop.policy, trajs, cfg.ppo)
                    batches_since_ckpt += 1
                    if batches_since_ckpt >= cfg.checkpoint_every:
                        self._checkpoint(stage_idx, loop, global_step,
                                         fixed_fpn_dict)
                        batches_since_ckpt = 0
                if stage == "fpn":
                    best = self.history.best("fpn")
                    fixed_fpn_dict = best.genome
                    self._write_leaderboard("fpn", cfg.fpn_top_k)
                else:
                    self._write_leaderboard("head", cfg.head_top_k)
                if stage_idx + 1 < len(stages):
                    # record the boundary: next stage starts fresh
                    boundary = _StageLoop(cfg, stages[stage_idx + 1])
                    self._checkpoint(stage_idx + 1, boundary, global_step,
                                     fixed_fpn_dict)
                else:
                    self._checkpoint(stage_idx, loop, global_step,
                                     fixed_fpn_dict)
        finally:
            if self._history_fh:
                self._history_fh.close()
                self._history_fh = None
            if self._pool is not None:
                self._pool.close()
                self._pool = None
        return self.history


def run_progressive_search(cfg: SearchConfig,
                           resume: bool = False) -> SearchHistory:
    """Run the configured search; see SearchRunner for the mechanics."""
    return SearchRunner(cfg).run(resume=resume)


# --- analyses ---------------------------------------------------------------

def sharing_trend(history: SearchHistory, window: int = 50):
    """Windowed sharing statistics over head-stage samples.

    Per window of ``window`` consecutive samples: the mean fraction of
    head layers under level-shared weights, (n - i) / n, and the mean
    fraction of those that are also branch-shared, (j - i) / max(n-i, 1).
    """
    points = []
    heads = history.for_stage("head")
    for w_start in range(0, len(heads), window):
        chunk = heads[w_start:w_start + window]
        head_fracs, branch_fracs = [], []
        for rec in chunk:
            body = rec.genome["head"]
            n = len(body["ops"])
            i, j = body["i"], body["j"]
            head_fracs.append((n - i) / n)
            branch_fracs.append((j - i) / max(n - i, 1))
        points.append((w_start // window,
                       float(np.mean(head_fracs)),
                       float(np.mean(branch_fracs))))
    return points


def _average_ranks(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[i:j + 1] = (i + j + 2) / 2.0  # average of 1-based ranks
        i = j + 1
    out = np.empty(len(v))
    out[order] = ranks
    return out


def _pearson(xs: np.ndarray, ys: np.ndarray) -> float:
    xc = xs - xs.mean()
    yc = ys - ys.mean()
    vx = float((xc * xc).sum())
    vy = float((yc * yc).sum())
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("zero variance in a series")
    return float((xc * yc).sum() / math.sqrt(vx * vy))


def correlation(xs, ys) -> tuple[float, float]:
    """(spearman, pearson); spearman is pearson over average ranks."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be 1-d and equally long")
    if len(x) < 3:
        raise ValueError("need at least 3 points")
    return (_pearson(_average_ranks(x), _average_ranks(y)), _pearson(x, y))


def reward_curve(history: SearchHistory, stage: str, window: int = 50):
    """Windowed mean rewards: list of (window_index, mean_reward)."""
    recs = history.for_stage(stage)
    return [(k // window,
             float(np.mean([r.reward for r in recs[k:k + window]])))
            for k in range(0, len(recs), window)]


def write_reports(history: SearchHistory, out_dir,
                  trend_window: int = 50,
                  downstream: dict | None = None,
                  gnuplot: bool = False) -> dict:
    """Emit report.json + report.txt (+ optional gnuplot .dat files).

    ``downstream`` maps genome hashes to a downstream metric; rewards
    are joined on hash and their spearman/pearson correlation reported.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"samples": len(history.records),
                    "rejected": history.rejected}
    for stage in ("fpn", "head"):
        recs = history.for_stage(stage)
        if not recs:
            continue
        best = history.best(stage)
        report[stage] = {
            "samples": len(recs),
            "best_reward": best.reward,
            "best_hash": best.hash,
            "reward_curve": reward_curve(history, stage, trend_window),
        }
    trend = sharing_trend(history, trend_window)
    if trend:
        report["sharing_trend"] = [
            {"window": w, "head_level": h, "branch_level": b}
            for w, h, b in trend]
    if downstream:
        seen: dict[str, float] = {}
        for rec in history.records:
            seen.setdefault(rec.hash, rec.reward)
        pairs = [(seen[h], m) for h, m in downstream.items() if h in seen]
        if len(pairs) >= 3:
            s, p = correlation([a for a, _ in pairs], [b for _, b in pairs])
            report["correlation"] = {"spearman": s, "pearson": p,
                                     "n": len(pairs)}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    lines = [f"samples: {len(history.records)}  rejected: {history.rejected}"]
    for stage in ("fpn", "head"):
        if stage in report:
            lines.append(f"[{stage}] best reward "
                         f"{report[stage]['best_reward']:.6f} over "
                         f"{report[stage]['samples']} samples")
    if "correlation" in report:
        c = report["correlation"]
        lines.append(f"reward vs downstream: spearman {c['spearman']:.3f} "
                     f"pearson {c['pearson']:.3f} (n={c['n']})")
    (out / "report.txt").write_text("\n".join(lines) + "\n")

    if gnuplot:
        for stage in ("fpn", "head"):
            if stage not in report:
                continue
            rows = [f"# window mean_reward"]
            rows += [f"{w} {m:.8f}" for w, m in report[stage]["reward_curve"]]
            (out / f"reward_{stage}.dat").write_text("\n".join(rows) + "\n")
        if trend:
            rows = ["# window head_level_share branch_level_share"]
            rows += [f"{w} {h:.6f} {b:.6f}" for w, h, b in trend]
            (out / "sharing_trend.dat").write_text("\n".join(rows) + "\n")
    return report
