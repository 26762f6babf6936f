"""Named, independently seeded random streams.

Each consumer (parameter init, the two dropout branches, batch shuffling)
draws from its own Philox generator derived from ``(seed, crc32(name))``,
so adding a stream never perturbs the others.
"""

import json
import zlib

import numpy as np

STREAM_NAMES = ("init", "dropout-syn", "dropout-aut", "shuffle")


def stream(seed, name):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))


class RngStreams:
    def __init__(self, seed, names=STREAM_NAMES):
        self.seed = int(seed)
        self._streams = {name: stream(self.seed, name) for name in names}

    def __getitem__(self, name):
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]

    def names(self):
        return list(self._streams)

    def get_state(self):
        return {name: _jsonable(g.bit_generator.state) for name, g in self._streams.items()}

    def set_state(self, states):
        for name, state in states.items():
            self[name].bit_generator.state = _from_jsonable(state)

    def to_bytes(self):
        return json.dumps({"seed": self.seed, "streams": self.get_state()}, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, blob):
        payload = json.loads(blob.decode())
        out = cls(payload["seed"], names=())
        out.set_state(payload["streams"])
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
