"""Multi-label undersampling over the protected-attribute x label grid."""

from __future__ import annotations

import numpy as np

from .tabular import GROUP_KEYS, DataError, Dataset


def multilabel_undersample(data: Dataset, seed: int) -> Dataset:
    """Balance the four (a, y) groups by undersampling to the smallest group.

    Every group keeps ``m = min count`` rows drawn uniformly without
    replacement (the minority group trivially keeps all of its rows), and the
    result is shuffled.  Output size is ``4 * m``.
    """
    a_col, y_col = data.schema.require_groups()
    group_of = data.codes[:, a_col] * 2 + data.codes[:, y_col]
    members = [np.flatnonzero(group_of == 2 * k.a + k.y) for k in GROUP_KEYS]
    empty = [tuple(k) for k, idx in zip(GROUP_KEYS, members) if idx.size == 0]
    if empty:
        raise DataError(f"cannot balance: group(s) (a, y) = {empty} have no rows")
    m = min(idx.size for idx in members)
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = np.concatenate([rng.choice(idx, size=m, replace=False) for idx in members])
    return data.take(rng.permutation(keep))
