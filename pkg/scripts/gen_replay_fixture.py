#!/usr/bin/env python3
"""Regenerate the shared wire-protocol replay fixture.

Writes 100 deterministic requests covering all three stages plus the
expected echo-mode responses (reward = genome-hash pseudo-reward).
Both test suites compare against these bytes, so regenerate only when
the wire format itself changes.
"""

from pathlib import Path

import numpy as np

from decnas.evaluation import WireRequest, WireResponse, hash_reward
from decnas.orchestrator import random_decoder_genome, random_fpn_genome
from decnas.search_space import DecoderGenome, FpnSpace, HeadSpace, genome_to_dict

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    rng = np.random.default_rng(20240811)
    fpn_space, head_space = FpnSpace(), HeadSpace()
    requests, responses = [], []
    for k in range(100):
        stage = ("fpn", "head", "full")[k % 3]
        if stage == "fpn":
            genome = genome_to_dict(random_fpn_genome(rng, fpn_space))
        else:
            # head-stage requests carry the provided pyramid genome
            genome = genome_to_dict(
                random_decoder_genome(rng, fpn_space, head_space))
        req = WireRequest(id=k, stage=stage, genome=genome,
                          config={"iterations": 300, "seed": k})
        requests.append(req.to_line())
        responses.append(WireResponse(
            id=k, status="ok", reward=hash_reward(genome)).to_line())
    (OUT / "replay_requests.jsonl").write_text("\n".join(requests) + "\n")
    (OUT / "replay_responses.jsonl").write_text("\n".join(responses) + "\n")
    print(f"wrote {len(requests)} requests and responses to {OUT}")


if __name__ == "__main__":
    main()
