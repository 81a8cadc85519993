"""Published task-similarity values used by the selection-replay tests."""

from __future__ import annotations

import numpy as np

from wsnas.distance import SimilarityMatrix

TABLE2_IDS = ["aircraft", "dtd", "birds", "flower", "imagenet"]

_PAIRS = {
    ("aircraft", "dtd"): 0.025,
    ("aircraft", "birds"): 0.020,
    ("aircraft", "flower"): 0.019,
    ("aircraft", "imagenet"): 0.020,
    ("dtd", "birds"): 0.023,
    ("dtd", "flower"): 0.018,
    ("dtd", "imagenet"): 0.014,
    ("birds", "flower"): 0.017,
    ("birds", "imagenet"): 0.019,
    ("flower", "imagenet"): 0.015,
}


def table2_matrix() -> SimilarityMatrix:
    n = len(TABLE2_IDS)
    values = np.zeros((n, n))
    for (a, b), dist in _PAIRS.items():
        i, j = TABLE2_IDS.index(a), TABLE2_IDS.index(b)
        values[i, j] = values[j, i] = dist
    return SimilarityMatrix(task_ids=list(TABLE2_IDS), values=values)


def table2_csv_text() -> str:
    return table2_matrix().to_csv()
