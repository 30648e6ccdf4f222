"""Counter-based random streams.

Every ensemble is addressed by a text label; replica block ``b`` of that
ensemble draws from a Philox generator keyed by (master seed, crc32(label), b).
The block partition is fixed by the block size only, so the numbers a replica
sees do not depend on how many workers process the blocks.
"""
import zlib
from dataclasses import dataclass

import numpy as np


@dataclass
class EngineStreams:
    """Independent generators for the regime clock and the Wiener increments."""
    clock: np.random.Generator
    noise: np.random.Generator


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def block_streams(master_seed: int, label: str, block: int) -> EngineStreams:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(label_key(label), int(block)))
    clock_seq, noise_seq = seq.spawn(2)
    return EngineStreams(
        clock=np.random.Generator(np.random.Philox(clock_seq)),
        noise=np.random.Generator(np.random.Philox(noise_seq)),
    )


def derived_seed(master_seed: int, label: str) -> int:
    """Plain integer seed for helpers that build their own generator (audits, bootstrap)."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(label_key(label),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
