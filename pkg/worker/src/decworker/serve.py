"""Stdin/stdout evaluation loop speaking the JSON-lines wire protocol.

  request  {"id": int, "stage": "fpn"|"head"|"full", "genome": {...},
            "config": {"iterations": int, "seed": int}}
  response {"id": int, "status": "ok"|"error", "reward": float,
            "components": {...}?, "message": str?}

One compact JSON object per line, keys in exactly that order, response
id echoing the request id. Echo mode skips training and returns the
hash pseudo-reward, which is what the search engine's replay fixture
pins down bit-exactly.
"""

from __future__ import annotations

import argparse
import json
import sys

from .genome import GenomeError, hash_reward
from .task import DivergedError, ToyTaskConfig, train_and_score


def response_line(id: int, status: str, reward: float | None = None,
                  components: dict | None = None,
                  message: str | None = None) -> str:
    body: dict = {"id": id, "status": status}
    if reward is not None:
        body["reward"] = reward
    if components is not None:
        body["components"] = components
    if message is not None:
        body["message"] = message
    return json.dumps(body, separators=(",", ":"))


def handle_line(line: str, args) -> str:
    rid = -1
    try:
        req = json.loads(line)
        rid = int(req.get("id", -1))
        genome = req["genome"]
        if args.mode == "echo":
            return response_line(rid, "ok", reward=hash_reward(genome))
        wire_cfg = req.get("config") or {}
        cfg = ToyTaskConfig(
            feature_channels=tuple(args.channels),
            image_hw=tuple(args.image_size),
            num_classes=args.classes,
            fpn_width=args.fpn_width, head_width=args.head_width,
            train_size=args.train_size, val_size=args.val_size,
            iterations=int(wire_cfg.get("iterations", args.iterations)),
            seed=int(wire_cfg.get("seed", args.seed)))
        result = train_and_score(genome, cfg, stage=req.get("stage", "full"))
        message = None
        if result["substituted"]:
            message = ("substituted standard conv for: "
                       + ",".join(result["substituted"]))
        return response_line(rid, "ok", reward=result["reward"],
                             components=result["components"], message=message)
    except DivergedError:
        return response_line(rid, "error", message="diverged")
    except (GenomeError, KeyError, ValueError, TypeError) as exc:
        return response_line(rid, "error", message=f"bad request: {exc}")


def _parse_hw(text: str) -> tuple[int, int]:
    h, w = text.lower().split("x")
    return int(h), int(w)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decworker",
        description="decoder evaluation worker (JSON lines on stdio)")
    parser.add_argument("--mode", choices=["train", "echo"], default="train")
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--channels", type=lambda s: [int(x) for x in s.split(",")],
                        default=[16, 24, 32], metavar="A,B,C")
    parser.add_argument("--image-size", type=_parse_hw, default=(64, 64),
                        metavar="HxW")
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--fpn-width", type=int, default=16)
    parser.add_argument("--head-width", type=int, default=16)
    parser.add_argument("--train-size", type=int, default=6)
    parser.add_argument("--val-size", type=int, default=3)
    return parser


def serve(args, stdin=None, stdout=None) -> None:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(handle_line(line, args) + "\n")
        stdout.flush()


def main(argv=None) -> int:
    serve(build_parser().parse_args(argv))
    return 0


if __name__ == "__main__":
    sys.exit(main())
