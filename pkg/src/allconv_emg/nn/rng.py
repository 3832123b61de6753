import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


class RngStream:
    """Named, seeded random stream.

    Two streams built from the same ``(seed, name)`` produce identical draws
    for identical call sequences. Child streams are derived by name, so adding
    a new consumer never perturbs an existing one.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed) & _MASK64
        self.name = name
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(name.encode("utf-8"))]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.random(shape, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def __repr__(self):
        return f"RngStream(seed={self.seed}, name={self.name!r})"
