"""LSTM controller and its PPO update, in plain numpy.

The controller emits one token per position of a stage's layout,
autoregressively: the input at step p is the embedding of the token
chosen at step p-1 (a learned start vector at step 0), a single LSTM
layer advances the hidden state, and a per-position output projection
produces the categorical logits. Per-position vocabularies are needed
because the pyramid id-token bounds grow with block depth.

Backpropagation through the LSTM is written out by hand (the package
carries no autodiff dependency); its correctness is pinned by a central
finite-difference oracle in the test suite. All math is float64.

Gate convention: the stacked pre-activation z = W_x x + W_h h + b is
split into quarters [input, forget, cell, output]:

    i = sigmoid(z_i), f = sigmoid(z_f), g = tanh(z_g), o = sigmoid(z_o)
    c' = f * c + i * g,  h' = o * tanh(c')
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .search_space import ActionSequence, FpnSpace, HeadSpace, Stage


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    vocab: tuple[int, ...]        # per-position token cardinalities
    hidden_size: int = 100
    embedding_size: int = 100
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.vocab or any(v < 1 for v in self.vocab):
            raise PolicyError("vocab must be non-empty positive cardinalities")

    @property
    def seq_len(self) -> int:
        return len(self.vocab)


def config_for_space(space: FpnSpace | HeadSpace,
                     hidden_size: int = 100,
                     embedding_size: int = 100) -> ControllerConfig:
    return ControllerConfig(vocab=space.vocab(), hidden_size=hidden_size,
                            embedding_size=embedding_size)


@dataclass
class PolicyState:
    """Controller weights plus Adam moments and the reward baseline.

    Mutated only by ppo_update, on the orchestrator's control thread;
    sampling and log_prob are read-only between updates.
    """

    config: ControllerConfig
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    opt_t: int = 0
    baseline: float | None = None
    stage: Stage | None = None


def init_policy(config: ControllerConfig, seed: int = 0,
                stage: Stage | None = None) -> PolicyState:
    rng = np.random.default_rng(seed)
    H, E, scale = config.hidden_size, config.embedding_size, config.init_scale
    params: dict[str, np.ndarray] = {
        "w_x": rng.normal(0.0, scale, size=(4 * H, E)),
        "w_h": rng.normal(0.0, scale, size=(4 * H, H)),
        "b": np.zeros(4 * H),
        "start": rng.normal(0.0, scale, size=E),
    }
    for p, v in enumerate(config.vocab):
        if p < config.seq_len - 1:
            params[f"emb{p}"] = rng.normal(0.0, scale, size=(v, E))
        params[f"out_w{p}"] = rng.normal(0.0, scale, size=(v, H))
        params[f"out_b{p}"] = np.zeros(v)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return PolicyState(config=config, params=params,
                       opt_m={k: v.copy() for k, v in zeros.items()},
                       opt_v={k: v.copy() for k, v in zeros.items()},
                       stage=stage)


@dataclass
class Trajectory:
    tokens: np.ndarray     # (L,) int64
    log_probs: np.ndarray  # (L,) float64, all <= 0
    entropies: np.ndarray  # (L,) float64
    stage: Stage | None = None
    reward: float | None = None

    def sequence(self) -> ActionSequence:
        if self.stage is None:
            raise PolicyError("trajectory has no stage attached")
        return ActionSequence(self.stage, tuple(int(t) for t in self.tokens))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _step(params: dict, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    H = h.shape[1]
    z = x @ params["w_x"].T + h @ params["w_h"].T + params["b"]
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc, h_new)


def _input_at(params: dict, tokens: np.ndarray, p: int, batch: int) -> np.ndarray:
    if p == 0:
        return np.broadcast_to(params["start"], (batch, params["start"].shape[0]))
    return params[f"emb{p - 1}"][tokens[:, p - 1]]


def _teacher_forward(state: PolicyState, tokens: np.ndarray):
    """Run the LSTM over given tokens; returns per-position log-prob
    matrices and the caches needed for backprop."""
    cfg = state.config
    B, L = tokens.shape
    if L != cfg.seq_len:
        raise PolicyError(f"expected {cfg.seq_len} tokens, got {L}")
    for p, v in enumerate(cfg.vocab):
        bad = (tokens[:, p] < 0) | (tokens[:, p] >= v)
        if bad.any():
            raise PolicyError(f"token out of range at position {p}")
    h = np.zeros((B, cfg.hidden_size))
    c = np.zeros((B, cfg.hidden_size))
    caches, logps = [], []
    for p in range(L):
        x = _input_at(state.params, tokens, p, B)
        h, c, cache = _step(state.params, x, h, c)
        logits = h @ state.params[f"out_w{p}"].T + state.params[f"out_b{p}"]
        logps.append(_log_softmax(logits))
        caches.append(cache)
    return logps, caches


def sample_tokens(state: PolicyState, n: int, rng: np.random.Generator):
    """Vectorized draw of n token rows; returns (tokens, log_probs,
    entropies) as (n, L) arrays. Deterministic given the rng state."""
    cfg = state.config
    L = cfg.seq_len
    h = np.zeros((n, cfg.hidden_size))
    c = np.zeros((n, cfg.hidden_size))
    tokens = np.zeros((n, L), dtype=np.int64)
    logp = np.zeros((n, L))
    ent = np.zeros((n, L))
    for p in range(L):
        x = _input_at(state.params, tokens, p, n)
        h, c, _ = _step(state.params, x, h, c)
        logits = h @ state.params[f"out_w{p}"].T + state.params[f"out_b{p}"]
        logprobs = _log_softmax(logits)
        probs = np.exp(logprobs)
        u = rng.random(n)
        picks = (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)
        tokens[:, p] = picks
        logp[:, p] = logprobs[np.arange(n), picks]
        ent[:, p] = -(probs * logprobs).sum(axis=1)
    return tokens, logp, ent


def sample_batch(state: PolicyState, n: int, rng: np.random.Generator) -> list[Trajectory]:
    """Draw n trajectories autoregressively; deterministic given rng state."""
    tokens, logp, ent = sample_tokens(state, n, rng)
    return [Trajectory(tokens=tokens[k].copy(), log_probs=logp[k].copy(),
                       entropies=ent[k].copy(), stage=state.stage)
            for k in range(n)]


def sample(state: PolicyState, rng: np.random.Generator) -> Trajectory:
    return sample_batch(state, 1, rng)[0]


def _as_token_array(state: PolicyState, seq) -> np.ndarray:
    if isinstance(seq, ActionSequence):
        if state.stage is not None and seq.stage is not state.stage:
            raise PolicyError(f"sequence stage {seq.stage.value} does not match policy")
        return np.asarray(seq.tokens, dtype=np.int64)
    return np.asarray(seq, dtype=np.int64)


def log_prob(state: PolicyState, seq) -> np.ndarray:
    """Per-token log-probabilities of an existing sequence under the
    current weights; matches the sampled values while weights are
    untouched."""
    tokens = _as_token_array(state, seq)[None, :]
    logps, _ = _teacher_forward(state, tokens)
    return np.array([logps[p][0, tokens[0, p]] for p in range(tokens.shape[1])])


def token_distributions(state: PolicyState, seq) -> list[np.ndarray]:
    """Per-position categorical distributions along a given token path."""
    tokens = _as_token_array(state, seq)[None, :]
    logps, _ = _teacher_forward(state, tokens)
    return [np.exp(lp[0]) for lp in logps]


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    learning_rate: float = 3.5e-4
    update_epochs: int = 4
    batch_size: int = 10
    entropy_coeff: float = 0.0
    baseline_decay: float = 0.95
    standardize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise PolicyError("clip_epsilon must be in (0, 1)")
        if self.batch_size < 1:
            raise PolicyError("batch_size must be >= 1")
        if self.update_epochs < 1:
            raise PolicyError("update_epochs must be >= 1")


def clipped_objective(logp_new: np.ndarray, logp_old: np.ndarray,
                      advantage: np.ndarray,
                      clip_epsilon: float) -> np.ndarray:
    """Per-token clipped surrogate min(r*A, clip(r)*A), r = exp(new-old)."""
    ratio = np.exp(logp_new - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return np.minimum(ratio * advantage, clipped * advantage)


@dataclass
class UpdateStats:
    objective: float
    surrogate: float
    entropy: float
    clip_fraction: float
    mean_ratio_first_epoch: float
    grad_norm: float
    baseline: float
    steps_taken: int


def objective_and_grad(state: PolicyState, tokens: np.ndarray,
                       old_logp: np.ndarray, advantages: np.ndarray,
                       cfg: PpoConfig):
    """PPO objective J and dJ/dparams at the current weights.

    J = mean_token[min(r*A, clip(r)*A)] + entropy_coeff * mean_token[H].
    Exposed separately so the finite-difference oracle can probe it as
    a pure function of the parameters.
    """
    B, L = tokens.shape
    logps, caches = _teacher_forward(state, tokens)
    denom = float(B * L)

    surr_sum = 0.0
    ent_sum = 0.0
    clip_hits = 0.0
    ratio_sum = 0.0
    dlogits: list[np.ndarray] = []
    for p in range(L):
        lp = logps[p]                              # (B, Vp)
        probs = np.exp(lp)
        tok = tokens[:, p]
        lp_tok = lp[np.arange(B), tok]
        ratio = np.exp(lp_tok - old_logp[:, p])
        unclipped = ratio * advantages
        clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon,
                          1.0 + cfg.clip_epsilon) * advantages
        take_unclipped = unclipped <= clipped
        surr_sum += np.minimum(unclipped, clipped).sum()
        clip_hits += np.count_nonzero(~take_unclipped)
        ratio_sum += ratio.sum()
        ent = -(probs * lp).sum(axis=1)
        ent_sum += ent.sum()

        coef = np.where(take_unclipped, ratio * advantages, 0.0) / denom
        dl = -coef[:, None] * probs
        dl[np.arange(B), tok] += coef
        if cfg.entropy_coeff != 0.0:
            dl += (cfg.entropy_coeff / denom) * (-probs * (lp + ent[:, None]))
        dlogits.append(dl)

    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    H = state.config.hidden_size
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for p in reversed(range(L)):
        x, h_prev, c_prev, i, f, g, o, tc, h_new = caches[p]
        dl = dlogits[p]
        grads[f"out_w{p}"] += dl.T @ h_new
        grads[f"out_b{p}"] += dl.sum(axis=0)
        dh = dl @ state.params[f"out_w{p}"] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        df = dc * c_prev
        dg = dc * i
        dz = np.concatenate([di * i * (1.0 - i),
                             df * f * (1.0 - f),
                             dg * (1.0 - g * g),
                             do * o * (1.0 - o)], axis=1)
        grads["w_x"] += dz.T @ x
        grads["w_h"] += dz.T @ h_prev
        grads["b"] += dz.sum(axis=0)
        dx = dz @ state.params["w_x"]
        dh_next = dz @ state.params["w_h"]
        dc_next = dc * f
        if p == 0:
            grads["start"] += dx.sum(axis=0)
        else:
            np.add.at(grads[f"emb{p - 1}"], tokens[:, p - 1], dx)

    objective = surr_sum / denom + cfg.entropy_coeff * ent_sum / denom
    stats = {
        "surrogate": surr_sum / denom,
        "entropy": ent_sum / denom,
        "clip_fraction": clip_hits / denom,
        "mean_ratio": ratio_sum / denom,
    }
    return objective, grads, stats


_ADAM_B1, _ADAM_B2, _ADAM_EPS = 0.9, 0.999, 1e-8


def _adam_ascent(state: PolicyState, grads: dict[str, np.ndarray],
                 lr: float) -> float:
    state.opt_t += 1
    t = state.opt_t
    sq_norm = 0.0
    for name, g in grads.items():
        sq_norm += float((g * g).sum())
        m = state.opt_m[name]
        v = state.opt_v[name]
        m *= _ADAM_B1
        m += (1 - _ADAM_B1) * g
        v *= _ADAM_B2
        v += (1 - _ADAM_B2) * g * g
        mhat = m / (1 - _ADAM_B1 ** t)
        vhat = v / (1 - _ADAM_B2 ** t)
        state.params[name] += lr * mhat / (np.sqrt(vhat) + _ADAM_EPS)
    return float(np.sqrt(sq_norm))


def ppo_update(state: PolicyState, batch: list[Trajectory],
               cfg: PpoConfig) -> UpdateStats:
    """Clipped-surrogate ascent over a batch of rewarded trajectories.

    Advantages are reward minus the EMA baseline, optionally
    batch-standardized. A batch whose advantages are all exactly zero
    leaves weights and optimizer state bitwise untouched (the surrogate
    gradient is identically zero). The baseline initializes to the
    first observed reward and then tracks the batch-mean reward.
    """
    if not batch:
        raise PolicyError("empty trajectory batch")
    if any(t.reward is None for t in batch):
        raise PolicyError("invalid reward")
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    if not np.all(np.isfinite(rewards)):
        raise PolicyError("invalid reward")
    tokens = np.stack([t.tokens for t in batch]).astype(np.int64)
    old_logp = np.stack([t.log_probs for t in batch])

    if state.baseline is None:
        state.baseline = float(rewards[0])
    adv = rewards - state.baseline
    if cfg.standardize_advantages and len(batch) > 1:
        std = adv.std()
        if std > 1e-12:
            adv = (adv - adv.mean()) / (std + 1e-8)
        else:
            adv = adv - adv.mean()

    baseline_next = (cfg.baseline_decay * state.baseline
                     + (1 - cfg.baseline_decay) * float(rewards.mean()))

    # All-zero advantages with no entropy bonus make the whole objective
    # gradient identically zero; skip the ascent so fresh optimizer
    # state stays bitwise untouched. With an entropy bonus the gradient
    # is not zero and the update must run.
    if np.all(adv == 0.0) and cfg.entropy_coeff == 0.0:
        state.baseline = baseline_next
        return UpdateStats(objective=0.0, surrogate=0.0, entropy=0.0,
                           clip_fraction=0.0, mean_ratio_first_epoch=1.0,
                           grad_norm=0.0, baseline=state.baseline,
                           steps_taken=0)

    objective = surrogate = entropy = clip_fraction = grad_norm = 0.0
    mean_ratio_first = 1.0
    for epoch in range(cfg.update_epochs):
        objective, grads, stats = objective_and_grad(
            state, tokens, old_logp, adv, cfg)
        if epoch == 0:
            mean_ratio_first = stats["mean_ratio"]
        surrogate = stats["surrogate"]
        entropy = stats["entropy"]
        clip_fraction = stats["clip_fraction"]
        grad_norm = _adam_ascent(state, grads, cfg.learning_rate)

    state.baseline = baseline_next
    return UpdateStats(objective=objective, surrogate=surrogate,
                       entropy=entropy, clip_fraction=clip_fraction,
                       mean_ratio_first_epoch=mean_ratio_first,
                       grad_norm=grad_norm, baseline=state.baseline,
                       steps_taken=cfg.update_epochs)


CHECKPOINT_VERSION = 1


def state_to_dict(state: PolicyState) -> dict:
    """Versioned JSON-friendly snapshot of every named tensor."""
    def pack(d: dict[str, np.ndarray]) -> dict:
        return {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in d.items()}
    return {
        "version": CHECKPOINT_VERSION,
        "config": {
            "vocab": list(state.config.vocab),
            "hidden_size": state.config.hidden_size,
            "embedding_size": state.config.embedding_size,
            "init_scale": state.config.init_scale,
        },
        "stage": state.stage.value if state.stage else None,
        "params": pack(state.params),
        "opt_m": pack(state.opt_m),
        "opt_v": pack(state.opt_v),
        "opt_t": state.opt_t,
        "baseline": state.baseline,
    }


def state_from_dict(data: dict) -> PolicyState:
    if data.get("version") != CHECKPOINT_VERSION:
        raise PolicyError(f"unsupported checkpoint version {data.get('version')}")

    def unpack(d: dict) -> dict[str, np.ndarray]:
        return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                for k, v in d.items()}
    cfg = ControllerConfig(vocab=tuple(data["config"]["vocab"]),
                           hidden_size=data["config"]["hidden_size"],
                           embedding_size=data["config"]["embedding_size"],
                           init_scale=data["config"]["init_scale"])
    stage = Stage(data["stage"]) if data.get("stage") else None
    return PolicyState(config=cfg, params=unpack(data["params"]),
                       opt_m=unpack(data["opt_m"]), opt_v=unpack(data["opt_v"]),
                       opt_t=data["opt_t"], baseline=data["baseline"],
                       stage=stage)


def save_checkpoint(state: PolicyState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(state_to_dict(state), fh)


def load_checkpoint(path) -> PolicyState:
    with open(path, encoding="utf-8") as fh:
        return state_from_dict(json.load(fh))
