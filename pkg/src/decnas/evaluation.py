"""Genome evaluation: rewards, caching, and external trainer dispatch.

Two evaluator families share one interface. The deterministic surrogate
scores a genome by similarity to a planted genome (known optimum), used
to verify the whole search loop without any training. The external
evaluator ships genomes to worker processes over a newline-delimited
JSON protocol and is how real trainer processes plug in.

Wire protocol, one message per line over the worker's stdin/stdout:

  request  {"id": int, "stage": "fpn"|"head"|"full", "genome": {...},
            "config": {"iterations": int, "seed": int}}
  response {"id": int, "status": "ok"|"error", "reward": float,
            "components": {"cls": float, "reg": float, "ctr": float}?,
            "message": str?}

Serialization is compact (no whitespace) with keys in exactly that
order; the response id echoes the request id. Evaluations are cached by
the canonical genome hash and persisted as append-only JSON lines.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from queue import Empty, Queue

import numpy as np

from .search_space import (
    ActionSequence,
    DecoderGenome,
    FpnGenome,
    Genome,
    HeadGenome,
    Stage,
    canonical_json,
    encode_fpn,
    encode_head,
    find_dangling,
    genome_from_dict,
    genome_hash,
    genome_to_dict,
    FpnSpace,
    HeadSpace,
)


class EvaluationError(RuntimeError):
    def __init__(self, message: str, request_id: int | None = None):
        super().__init__(message)
        self.request_id = request_id


class ProtocolError(EvaluationError):
    pass


class RewardMode(Enum):
    NEG_LOSS = "neg_loss"
    AP = "ap"


@dataclass(frozen=True)
class Reward:
    """An opaque scalar plus its provenance mode.

    Negative-loss rewards may carry the three loss components, in which
    case the value must equal minus their sum. AP-mode values live in
    [0, 1].
    """

    value: float
    mode: RewardMode = RewardMode.NEG_LOSS
    components: dict | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise EvaluationError("invalid reward")
        if self.mode is RewardMode.AP and not 0.0 <= self.value <= 1.0:
            raise EvaluationError("AP reward must be in [0, 1]")
        if self.mode is RewardMode.NEG_LOSS and self.components is not None:
            total = sum(self.components.values())
            if abs(self.value + total) > 1e-9 * max(1.0, abs(total)):
                raise EvaluationError("negative-loss reward does not match components")

    @classmethod
    def from_components(cls, cls_loss: float, reg_loss: float,
                        ctr_loss: float) -> "Reward":
        comps = {"cls": float(cls_loss), "reg": float(reg_loss),
                 "ctr": float(ctr_loss)}
        return cls(value=-(comps["cls"] + comps["reg"] + comps["ctr"]),
                   mode=RewardMode.NEG_LOSS, components=comps)


def hash_reward(genome_or_hash) -> float:
    """Deterministic pseudo-reward from the canonical genome hash:
    (digest as integer) mod 1000 / 1000. Shared contract with the
    echo-mode worker, so both sides can be cross-checked."""
    h = genome_or_hash if isinstance(genome_or_hash, str) else genome_hash(genome_or_hash)
    return (int(h, 16) % 1000) / 1000


# --- deterministic surrogate -------------------------------------------------

DEFAULT_FEATURE_WEIGHTS = {"tokens": 1.0, "dangling": 0.25, "share": 0.25}


@dataclass(frozen=True)
class SurrogateSpec:
    """Planted-optimum reward surface.

    reward = sum_f weights[f] * match_f(genome, planted)
             - cost_penalty * normalized_flops(genome) + noise

    Match features: per-slot token agreement, Jaccard similarity of the
    dangling-block sets, and closeness of the head sharing indices.
    With zero penalty and zero noise the planted genome is the unique
    maximizer, because token agreement peaks only at the planted genome
    (the codec is bijective). Noise, when enabled, is drawn from a rng
    seeded by the genome hash so evaluation stays a pure function.
    """

    planted: Genome
    weights: dict = field(default_factory=lambda: dict(DEFAULT_FEATURE_WEIGHTS))
    noise_sigma: float = 0.0
    cost_penalty: float = 0.0
    noise_seed: int = 0
    fpn_space: FpnSpace | None = None
    head_space: HeadSpace | None = None

    @property
    def stage(self) -> str:
        if isinstance(self.planted, DecoderGenome):
            return "full"
        return "fpn" if isinstance(self.planted, FpnGenome) else "head"


def _token_vector(spec: SurrogateSpec, genome: Genome) -> list[int]:
    toks: list[int] = []
    fpn = getattr(genome, "fpn", genome if isinstance(genome, FpnGenome) else None)
    head = getattr(genome, "head", genome if isinstance(genome, HeadGenome) else None)
    if fpn is not None:
        toks.extend(encode_fpn(fpn, spec.fpn_space).tokens)
    if head is not None:
        toks.extend(encode_head(head, spec.head_space).tokens)
    return toks


def _match_part(genome: Genome, want: type):
    if isinstance(genome, want):
        return genome
    if isinstance(genome, DecoderGenome):
        return genome.fpn if want is FpnGenome else genome.head
    return None


def surrogate_reward(spec: SurrogateSpec, genome: Genome) -> Reward:
    """Similarity of ``genome`` to the planted genome, as a Reward."""
    planted = spec.planted
    g_fpn = _match_part(genome, FpnGenome)
    g_head = _match_part(genome, HeadGenome)
    p_fpn = _match_part(planted, FpnGenome)
    p_head = _match_part(planted, HeadGenome)
    if (p_fpn is not None and g_fpn is None) or (p_head is not None and g_head is None):
        raise EvaluationError(
            f"stage mismatch: surrogate expects {spec.stage}, "
            f"got {type(genome).__name__}")

    value = 0.0
    w = spec.weights
    if w.get("tokens"):
        # Agreement over the planted genome's own slots.
        sub = genome
        if isinstance(planted, FpnGenome):
            sub = g_fpn
        elif isinstance(planted, HeadGenome):
            sub = g_head
        a = _token_vector(spec, sub)
        b = _token_vector(spec, planted)
        if len(a) != len(b):
            raise EvaluationError("stage mismatch: token layouts differ")
        agree = sum(1 for x, y in zip(a, b) if x == y) / len(b)
        value += w["tokens"] * agree
    if w.get("dangling") and p_fpn is not None:
        da, db = find_dangling(g_fpn), find_dangling(p_fpn)
        union = da | db
        jaccard = 1.0 if not union else len(da & db) / len(union)
        value += w["dangling"] * jaccard
    if w.get("share") and p_head is not None:
        n = p_head.n_layers
        dist = (abs(g_head.share_start - p_head.share_start)
                + abs(g_head.branch_split - p_head.branch_split))
        value += w["share"] * (1.0 - dist / (2 * n))
    if spec.cost_penalty:
        value -= spec.cost_penalty * _normalized_flops(spec, genome)
    if spec.noise_sigma > 0.0:
        seed_material = f"{spec.noise_seed}:{genome_hash(genome)}".encode()
        seed = int.from_bytes(hashlib.sha256(seed_material).digest()[:8], "big")
        value += float(np.random.default_rng(seed).normal(0.0, spec.noise_sigma))
    return Reward(value=value, mode=RewardMode.NEG_LOSS)


_PENALTY_EVAL = dict(backbone_channels=(64, 64, 64), fpn_width=64,
                     head_width=64, image=(128, 128), num_classes=8)


def _with_default_parts(genome: Genome) -> DecoderGenome:
    from .cost_model import baseline_head_genome
    if isinstance(genome, DecoderGenome):
        return genome
    if isinstance(genome, FpnGenome):
        return DecoderGenome(fpn=genome, head=baseline_head_genome())
    raise EvaluationError("cost penalty needs a genome with a pyramid part")


def _normalized_flops(spec: SurrogateSpec, genome: Genome) -> float:
    """FLOPs of the genome divided by FLOPs of the planted genome, both
    at a fixed small measurement configuration."""
    from .cost_model import cost_of
    ref = cost_of(_with_default_parts(spec.planted), **_PENALTY_EVAL).flops
    got = cost_of(_with_default_parts(genome), **_PENALTY_EVAL).flops
    return got / ref if ref else 0.0


# --- cache -------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    genome_hash: str
    reward: Reward
    evaluator_id: str
    timestamp: float


class EvalCache:
    """Hash-keyed reward store; at most one record per hash. Reads are
    concurrent, writes exclusive. Optionally persists every insert as a
    JSON line so caches survive restarts and travel between runs."""

    def __init__(self, path=None):
        self._records: dict[str, EvalRecord] = {}
        self._lock = threading.Lock()
        self._path = path
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            self._insert(self._record_from_json(line), persist=False)
            except FileNotFoundError:
                pass

    @staticmethod
    def _record_from_json(line: str) -> EvalRecord:
        d = json.loads(line)
        reward = Reward(value=d["reward"], mode=RewardMode(d["mode"]),
                        components=d.get("components"))
        return EvalRecord(genome_hash=d["hash"], reward=reward,
                          evaluator_id=d["evaluator"], timestamp=d["timestamp"])

    @staticmethod
    def _record_to_json(rec: EvalRecord) -> str:
        d = {"hash": rec.genome_hash, "reward": rec.reward.value,
             "mode": rec.reward.mode.value, "evaluator": rec.evaluator_id,
             "timestamp": rec.timestamp}
        if rec.reward.components is not None:
            d["components"] = rec.reward.components
        return json.dumps(d, separators=(",", ":"))

    def _insert(self, rec: EvalRecord, persist: bool = True) -> None:
        if rec.genome_hash in self._records:
            return
        self._records[rec.genome_hash] = rec
        if persist and self._path is not None:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(self._record_to_json(rec) + "\n")

    def get(self, genome_hash: str) -> EvalRecord | None:
        return self._records.get(genome_hash)

    def put(self, rec: EvalRecord) -> None:
        with self._lock:
            self._insert(rec)

    def __len__(self) -> int:
        return len(self._records)


def evaluate(genome: Genome, evaluator, cache: EvalCache | None = None) -> Reward:
    """Single-genome evaluation through the cache."""
    return evaluate_batch([genome], evaluator, cache)[0]


def evaluate_batch(genomes: list, evaluator,
                   cache: EvalCache | None = None) -> list[Reward]:
    """Evaluate genomes, serving repeats from the cache; cache misses
    are dispatched to the evaluator as one batch. Mixed reward modes in
    one batch are rejected."""
    hashes = [genome_hash(g) for g in genomes]
    rewards: dict[int, Reward] = {}
    miss_idx: list[int] = []
    pending_hashes: set[str] = set()
    for idx, h in enumerate(hashes):
        rec = cache.get(h) if cache is not None else None
        if rec is not None:
            rewards[idx] = rec.reward
        elif h in pending_hashes:
            pass  # duplicate within the batch; resolved after dispatch
        else:
            miss_idx.append(idx)
            pending_hashes.add(h)
    if miss_idx:
        fresh = evaluator.evaluate_batch([genomes[i] for i in miss_idx])
        now = time.time()
        for idx, reward in zip(miss_idx, fresh):
            rewards[idx] = reward
            if cache is not None:
                cache.put(EvalRecord(genome_hash=hashes[idx], reward=reward,
                                     evaluator_id=evaluator.evaluator_id,
                                     timestamp=now))
    by_hash = {hashes[i]: r for i, r in rewards.items()}
    out = [rewards.get(i) or by_hash[hashes[i]] for i in range(len(genomes))]
    modes = {r.mode for r in out}
    if len(modes) > 1:
        raise EvaluationError("mixed reward modes in one batch")
    return out


class SurrogateEvaluator:
    """In-process deterministic evaluator around a SurrogateSpec."""

    def __init__(self, spec: SurrogateSpec):
        self.spec = spec
        self.evaluator_id = "surrogate"
        self.dispatch_count = 0

    def evaluate_batch(self, genomes: list) -> list[Reward]:
        self.dispatch_count += len(genomes)
        return [surrogate_reward(self.spec, g) for g in genomes]


# --- wire protocol -----------------------------------------------------------

@dataclass(frozen=True)
class WireRequest:
    id: int
    stage: str          # "fpn" | "head" | "full"
    genome: dict
    config: dict        # {"iterations": int, "seed": int}

    def to_line(self) -> str:
        return json.dumps({"id": self.id, "stage": self.stage,
                           "genome": self.genome, "config": self.config},
                          separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "WireRequest":
        d = json.loads(line)
        return cls(id=int(d["id"]), stage=d["stage"], genome=d["genome"],
                   config=d.get("config", {}))


@dataclass(frozen=True)
class WireResponse:
    id: int
    status: str         # "ok" | "error"
    reward: float | None = None
    components: dict | None = None
    message: str | None = None

    def to_line(self) -> str:
        d: dict = {"id": self.id, "status": self.status}
        if self.reward is not None:
            d["reward"] = self.reward
        if self.components is not None:
            d["components"] = self.components
        if self.message is not None:
            d["message"] = self.message
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "WireResponse":
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed response line: {exc}") from exc
        if "id" not in d or "status" not in d:
            raise ProtocolError("response missing id or status")
        return cls(id=int(d["id"]), status=d["status"],
                   reward=d.get("reward"), components=d.get("components"),
                   message=d.get("message"))


class _Worker:
    def __init__(self, command: list[str], out_queue: Queue, index: int):
        self.index = index
        self.proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            text=True, bufsize=1)
        self.alive = True
        self.inflight: WireRequest | None = None
        self.deadline: float | None = None
        self._reader = threading.Thread(
            target=self._read_loop, args=(out_queue,), daemon=True)
        self._reader.start()

    def _read_loop(self, out_queue: Queue) -> None:
        try:
            for line in self.proc.stdout:
                if line.strip():
                    out_queue.put(("line", self.index, line))
        except ValueError:
            pass
        out_queue.put(("eof", self.index, None))

    def send(self, req: WireRequest, timeout: float) -> None:
        self.inflight = req
        self.deadline = time.monotonic() + timeout
        self.proc.stdin.write(req.to_line() + "\n")
        self.proc.stdin.flush()

    def kill(self) -> None:
        self.alive = False
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


class WorkerPool:
    """Local pool of evaluator subprocesses speaking the wire protocol.

    Each worker handles one request at a time. A request whose worker
    dies or times out is re-queued onto a live worker exactly once and
    then failed. Responses are matched to requests by id, whatever the
    arrival order."""

    def __init__(self, command: list[str], num_workers: int = 1,
                 timeout: float = 600.0):
        if num_workers < 1:
            raise EvaluationError("need at least one worker")
        self.command = list(command)
        self.timeout = timeout
        self._queue: Queue = Queue()
        self.workers = [_Worker(self.command, self._queue, k)
                        for k in range(num_workers)]

    def live_workers(self) -> list[_Worker]:
        return [w for w in self.workers if w.alive]

    def dispatch(self, requests: list[WireRequest]) -> list[WireResponse]:
        pending: deque[WireRequest] = deque(requests)
        retried: set[int] = set()
        results: dict[int, WireResponse] = {}
        first_error: dict[int, str] = {}
        want = {r.id for r in requests}
        if len(want) != len(requests):
            raise ProtocolError("duplicate request ids in one dispatch")

        def fail(req: WireRequest, why: str) -> None:
            if req.id in first_error:
                why = f"{why} (after {first_error[req.id]})"
            results[req.id] = WireResponse(id=req.id, status="error", message=why)

        def handle_worker_loss(worker: _Worker, why: str) -> None:
            worker.kill()
            req = worker.inflight
            worker.inflight = None
            if req is not None and req.id not in results:
                if req.id in retried:
                    fail(req, f"{why}; retry budget exhausted")
                else:
                    retried.add(req.id)
                    first_error[req.id] = why
                    pending.appendleft(req)

        while len(results) < len(requests):
            for worker in self.live_workers():
                if worker.inflight is None and pending:
                    worker.send(pending.popleft(), self.timeout)
            if not self.live_workers():
                while pending:
                    fail(pending.popleft(), "no live workers")
                for w in self.workers:
                    if w.inflight is not None and w.inflight.id not in results:
                        fail(w.inflight, "no live workers")
                        w.inflight = None
                continue

            now = time.monotonic()
            deadlines = [w.deadline for w in self.live_workers()
                         if w.inflight is not None and w.deadline is not None]
            wait = max(0.01, min((d - now for d in deadlines), default=0.1))
            try:
                kind, widx, payload = self._queue.get(timeout=min(wait, 1.0))
            except Empty:
                kind = None
            if kind == "line":
                worker = self.workers[widx]
                try:
                    resp = WireResponse.from_line(payload)
                except ProtocolError as exc:
                    handle_worker_loss(worker, f"protocol error: {exc}")
                    continue
                if resp.id not in want:
                    raise ProtocolError(f"unsolicited response id {resp.id}")
                if resp.id in results:
                    raise ProtocolError(f"response id {resp.id} delivered twice")
                results[resp.id] = resp
                if worker.inflight is not None and worker.inflight.id == resp.id:
                    worker.inflight = None
                    worker.deadline = None
            elif kind == "eof":
                worker = self.workers[widx]
                if worker.alive:
                    handle_worker_loss(worker, "worker died")
            # Timeouts.
            now = time.monotonic()
            for worker in self.live_workers():
                if (worker.inflight is not None and worker.deadline is not None
                        and now > worker.deadline):
                    handle_worker_loss(
                        worker, f"timeout after {self.timeout}s "
                                f"(request {worker.inflight.id})")
        return [results[r.id] for r in requests]

    def close(self) -> None:
        for w in self.workers:
            if w.proc.poll() is None and w.proc.stdin:
                try:
                    w.proc.stdin.close()
                except OSError:
                    pass
            w.kill()

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def external_dispatch(pool: WorkerPool,
                      requests: list[WireRequest]) -> list[WireResponse]:
    """Distribute requests over the pool; responses in request order."""
    return pool.dispatch(requests)


class ExternalEvaluator:
    """Evaluator backed by a WorkerPool.

    Pyramid-only genomes go out as stage "fpn" (the worker attaches its
    default head), full genomes as stage "full". Worker error responses
    raise EvaluationError carrying the request id."""

    def __init__(self, pool: WorkerPool, iterations: int = 300, seed: int = 0,
                 stage: str | None = None):
        self.pool = pool
        self.iterations = iterations
        self.seed = seed
        self.stage = stage  # overrides the inferred stage tag when set
        self.evaluator_id = "external"
        self._next_id = 0

    def _request_for(self, genome: Genome) -> WireRequest:
        if self.stage is not None:
            stage = self.stage
        elif isinstance(genome, DecoderGenome):
            stage = "full"
        elif isinstance(genome, FpnGenome):
            stage = "fpn"
        else:
            stage = "head"
        req = WireRequest(id=self._next_id, stage=stage,
                          genome=genome_to_dict(genome),
                          config={"iterations": self.iterations,
                                  "seed": self.seed})
        self._next_id += 1
        return req

    def evaluate_batch(self, genomes: list) -> list[Reward]:
        requests = [self._request_for(g) for g in genomes]
        responses = external_dispatch(self.pool, requests)
        out = []
        for resp in responses:
            if resp.status != "ok" or resp.reward is None:
                raise EvaluationError(
                    f"evaluation failed: {resp.message or 'worker error'}",
                    request_id=resp.id)
            if resp.components is not None:
                out.append(Reward.from_components(
                    resp.components["cls"], resp.components["reg"],
                    resp.components["ctr"]))
            else:
                out.append(Reward(value=resp.reward, mode=RewardMode.NEG_LOSS))
        return out
