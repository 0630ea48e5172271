"""Integer-coded compressed layers."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .intra_search import LOWRANK, QUANT, memory_footprint
from .quantizer import QuantParams, dequantize


@dataclass
class CompressedLayer:
    """Codes and parameters of one compressed layer.

    ``codes`` holds one matrix for a quant-only layer and two (``A`` then
    ``B``) for a low-rank layer.
    """

    name: str
    kind: str
    codes: Tuple[np.ndarray, ...]
    params: Tuple[QuantParams, ...]

    @property
    def rank(self):
        return self.codes[0].shape[1] if self.kind == LOWRANK else None

    @property
    def bits(self):
        return tuple(p.bits for p in self.params)

    def factors(self):
        return [dequantize(c, p) for c, p in zip(self.codes, self.params)]

    def dense_weight(self):
        mats = self.factors()
        return mats[0] @ mats[1] if self.kind == LOWRANK else mats[0]

    @property
    def shape(self):
        if self.kind == LOWRANK:
            return (self.codes[0].shape[0], self.codes[1].shape[1])
        return self.codes[0].shape

    @property
    def memory_bits(self):
        n_out, n_in = self.shape
        if self.kind == LOWRANK:
            return memory_footprint(LOWRANK, n_out, n_in, rank=self.rank,
                                    bits_a=self.bits[0], bits_b=self.bits[1])
        return memory_footprint(QUANT, n_out, n_in, bits_w=self.bits[0])
