"""Named, grouped parameter containers."""
import numpy as np

from .autodiff import Tensor

GROUPS = ("backbone", "gnn", "classifier", "discriminator")


class ParameterSet:
    """Ordered map ``name -> Tensor`` where each entry belongs to one group."""

    def __init__(self):
        self._params = {}
        self._groups = {}

    def add(self, name, value, group):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def group_of(self, name):
        return self._groups[name]

    def names(self, group=None):
        return [n for n in self._params if group is None or self._groups[n] == group]

    def groups(self):
        return sorted(set(self._groups.values()), key=GROUPS.index)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def num_values(self):
        return sum(t.data.size for t in self._params.values())

    def state_dict(self, groups=None):
        return {n: t.data.copy() for n, t in self._params.items()
                if groups is None or self._groups[n] in groups}

    def load_state_dict(self, state, strict=True):
        for name, arr in state.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            cur = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != cur.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {cur.data.shape}")
            cur.data = arr.copy()


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
