"""Named random substreams derived from one root seed.

Every source of randomness in a run (weight init, each training batch,
the validation set, trajectory plotting) pulls from its own substream so
that changing one of them never perturbs the others.
"""

from __future__ import annotations

import numpy as np


def _tag_ints(tags):
    out = []
    for t in tags:
        if isinstance(t, str):
            out.append(int.from_bytes(t.encode("utf-8"), "little"))
        else:
            out.append(int(t))
    return out


def substream(root_seed: int, *tags) -> np.random.Generator:
    """Generator for the substream named by ``tags`` under ``root_seed``."""
    ss = np.random.SeedSequence([int(root_seed)] + _tag_ints(tags))
    return np.random.default_rng(ss)


def substream_seed(root_seed: int, *tags) -> int:
    """A plain integer seed for the named substream (recordable in file headers)."""
    ss = np.random.SeedSequence([int(root_seed)] + _tag_ints(tags))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
