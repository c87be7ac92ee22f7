"""Global diagnostic counters: multiply-add tallies for the attention core
and overflow-clamp events in the random-feature map.

Counts are incremented from shape arithmetic at the call sites of the hot
kernels, so they are exact integers independent of timing or threading.
"""

from __future__ import annotations

import dataclasses


@dataclasses.dataclass
class Counters:
    exact_attention_madds: int = 0
    linear_attention_madds: int = 0
    feature_clamp_events: int = 0

    def reset(self) -> None:
        self.exact_attention_madds = 0
        self.linear_attention_madds = 0
        self.feature_clamp_events = 0


counters = Counters()
