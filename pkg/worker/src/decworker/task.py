"""Synthetic proxy task: cached random backbone features, targets from a
frozen random teacher decoder, and the short training schedule used to
score a genome.

The backbone never exists here: c3/c4/c5 are fixed random tensors cached
up front, so only the decoder trains. The trained weights are evaluated
through a Polyak (exponential moving) average. The score is the
negative sum of the three detection-style losses on the held-out split:
a focal binary classification loss over K channels, an IoU loss over
the 4 box-distance channels at positive locations, and a binary
cross-entropy on the centerness channel. Loss constants (focal alpha
0.25 / gamma 2, distance floor 0.05) live here and nowhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .genome import Decoder, FPN_OPS, HEAD_OPS, AGG_OPS, parse_decoder
from .network import DecoderNet

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
DIST_FLOOR = 0.05


@dataclass(frozen=True)
class ToyTaskConfig:
    feature_channels: tuple[int, int, int] = (16, 24, 32)
    image_hw: tuple[int, int] = (64, 64)   # strides 8/16/32 set the map sizes
    num_classes: int = 4
    fpn_width: int = 16
    head_width: int = 16
    train_size: int = 6
    val_size: int = 3
    iterations: int = 300
    learning_rate: float = 8e-4
    polyak_decay: float = 0.9
    seed: int = 0

    def level_hw(self, stride: int) -> tuple[int, int]:
        h, w = self.image_hw
        return math.ceil(h / stride), math.ceil(w / stride)


@dataclass
class CachedFeatures:
    """Fixed inputs and teacher-derived targets; never updated while the
    decoder trains."""
    train: list[torch.Tensor]        # [c3, c4, c5], each (N, C, H, W)
    val: list[torch.Tensor]
    train_targets: list[dict]        # per level: labels / ctr / reg tensors
    val_targets: list[dict]


def random_genome_dict(rng: np.random.Generator, n_blocks: int = 7,
                       n_layers: int = 6) -> dict:
    blocks = []
    for t in range(1, n_blocks + 1):
        bound = 3 + t - 1
        blocks.append({
            "id1": int(rng.integers(bound)), "id2": int(rng.integers(bound)),
            "op1": FPN_OPS[int(rng.integers(len(FPN_OPS)))],
            "op2": FPN_OPS[int(rng.integers(len(FPN_OPS)))],
            "agg": AGG_OPS[int(rng.integers(len(AGG_OPS)))]})
    i = int(rng.integers(n_layers + 1))
    j = int(rng.integers(i, n_layers + 1))
    ops = [HEAD_OPS[int(rng.integers(len(HEAD_OPS)))] for _ in range(n_layers)]
    return {"fpn": {"blocks": blocks},
            "head": {"ops": ops, "i": i, "j": j}}


def build_net(decoder: Decoder, cfg: ToyTaskConfig, init_seed: int) -> DecoderNet:
    net = DecoderNet(decoder, cfg.feature_channels, cfg.fpn_width,
                     cfg.head_width, cfg.image_hw, cfg.num_classes)
    net.init_weights(init_seed)
    return net


def materialize(genome: dict, cfg: ToyTaskConfig, stage: str = "full") -> DecoderNet:
    """Parse and build the trainable decoder for a request genome."""
    return build_net(parse_decoder(genome, stage), cfg, init_seed=cfg.seed + 1)


def _random_features(cfg: ToyTaskConfig, n: int,
                     gen: torch.Generator) -> list[torch.Tensor]:
    feats = []
    for ch, stride in zip(cfg.feature_channels, (8, 16, 32)):
        h, w = cfg.level_hw(stride)
        feats.append(torch.randn(n, ch, h, w, generator=gen))
    return feats


def _targets_from_teacher(teacher: DecoderNet,
                          features: list[torch.Tensor]) -> list[dict]:
    targets = []
    with torch.no_grad():
        for cls_logit, ctr_logit, reg_raw in teacher(*features):
            labels = (cls_logit > 0).to(torch.float32)
            positive = labels.amax(dim=1, keepdim=True)
            targets.append({
                "labels": labels,
                "positive": positive,
                "ctr": torch.sigmoid(ctr_logit),
                "reg": F.softplus(reg_raw) + DIST_FLOOR,
            })
    return targets


def make_cached_features(cfg: ToyTaskConfig) -> tuple[CachedFeatures, DecoderNet]:
    """Random fixed features plus targets from a frozen random teacher."""
    gen = torch.Generator().manual_seed(cfg.seed)
    train = _random_features(cfg, cfg.train_size, gen)
    val = _random_features(cfg, cfg.val_size, gen)
    teacher_rng = np.random.default_rng(cfg.seed + 7)
    teacher = build_net(parse_decoder(random_genome_dict(teacher_rng), "full"),
                        cfg, init_seed=cfg.seed + 13)
    teacher.eval()
    cached = CachedFeatures(train=train, val=val,
                            train_targets=_targets_from_teacher(teacher, train),
                            val_targets=_targets_from_teacher(teacher, val))
    return cached, teacher


def focal_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p_t = p * labels + (1 - p) * (1 - labels)
    alpha_t = FOCAL_ALPHA * labels + (1 - FOCAL_ALPHA) * (1 - labels)
    return (alpha_t * (1 - p_t) ** FOCAL_GAMMA * ce).mean()


def iou_loss(pred_dist: torch.Tensor, target_dist: torch.Tensor,
             positive: torch.Tensor) -> torch.Tensor:
    """-log IoU between the two distance-encoded boxes at positive
    locations; distances are (left, top, right, bottom) around a shared
    center."""
    if positive.sum() == 0:
        return pred_dist.new_zeros(())
    l1, t1, r1, b1 = pred_dist.unbind(dim=1)
    l2, t2, r2, b2 = target_dist.unbind(dim=1)
    inter = ((torch.minimum(l1, l2) + torch.minimum(r1, r2))
             * (torch.minimum(t1, t2) + torch.minimum(b1, b2)))
    area1 = (l1 + r1) * (t1 + b1)
    area2 = (l2 + r2) * (t2 + b2)
    union = area1 + area2 - inter
    iou = (inter + 1e-6) / (union + 1e-6)
    mask = positive.squeeze(1) > 0
    return -(torch.log(iou[mask])).mean()


def detection_losses(outputs, targets) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-level losses summed over the pyramid."""
    zero = outputs[0][0].new_zeros(())
    cls_total, reg_total, ctr_total = zero.clone(), zero.clone(), zero.clone()
    for (cls_logit, ctr_logit, reg_raw), tgt in zip(outputs, targets):
        cls_total = cls_total + focal_loss(cls_logit, tgt["labels"])
        pred_dist = F.softplus(reg_raw) + DIST_FLOOR
        reg_total = reg_total + iou_loss(pred_dist, tgt["reg"], tgt["positive"])
        mask = tgt["positive"] > 0
        if mask.any():
            ctr_total = ctr_total + F.binary_cross_entropy_with_logits(
                ctr_logit[mask], tgt["ctr"][mask])
    return cls_total, reg_total, ctr_total


def score_from_losses(cls_loss: float, reg_loss: float,
                      ctr_loss: float) -> dict:
    """Negative-loss reward with its components."""
    components = {"cls": float(cls_loss), "reg": float(reg_loss),
                  "ctr": float(ctr_loss)}
    return {"reward": -(components["cls"] + components["reg"]
                        + components["ctr"]),
            "components": components}


class DivergedError(RuntimeError):
    pass


def _evaluate(net: DecoderNet, weights: dict, features, targets) -> dict:
    saved = {k: v.detach().clone() for k, v in net.state_dict().items()}
    net.load_state_dict(weights)
    net.eval()
    with torch.no_grad():
        losses = detection_losses(net(*features), targets)
    net.load_state_dict(saved)
    values = [float(x) for x in losses]
    if not all(math.isfinite(v) for v in values):
        raise DivergedError("diverged")
    return score_from_losses(*values)


def train_and_score(genome: dict, cfg: ToyTaskConfig,
                    stage: str = "full") -> dict:
    """Train the decoder on the cached meta-train split and score the
    Polyak-averaged weights on the meta-val split.

    Returns {"reward", "components", "initial", "substituted"}; raises
    DivergedError on non-finite losses.
    """
    torch.set_num_threads(1)  # keeps reductions deterministic
    cached, _ = make_cached_features(cfg)
    net = materialize(genome, cfg, stage)
    initial = _evaluate(net, {k: v.detach().clone()
                              for k, v in net.state_dict().items()},
                        cached.val, cached.val_targets)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    polyak = {k: v.detach().clone() for k, v in net.state_dict().items()}
    net.train()
    for _ in range(cfg.iterations):
        opt.zero_grad()
        cls_l, reg_l, ctr_l = detection_losses(net(*cached.train),
                                               cached.train_targets)
        loss = cls_l + reg_l + ctr_l
        if not torch.isfinite(loss):
            raise DivergedError("diverged")
        loss.backward()
        opt.step()
        with torch.no_grad():
            state = net.state_dict()
            for key, ema in polyak.items():
                ema.mul_(cfg.polyak_decay).add_(state[key],
                                                alpha=1 - cfg.polyak_decay)

    final = _evaluate(net, polyak, cached.val, cached.val_targets)
    final["initial"] = initial
    final["substituted"] = net.substituted
    return final
