"""Shared finite-difference cases: one small scalar function per differentiable op."""

import numpy as np

from plma import tensor as T

OPS = {
    "conv1d": lambda r: (lambda x, w, b: T.sum(T.square(T.conv1d(x, w, b))),
                         [r.normal(size=(6, 3)), r.normal(size=(2, 3, 3)), r.normal(size=2)]),
    "selu": lambda r: (lambda x: T.sum(T.square(T.selu(x))), [r.normal(size=(4, 3))]),
    "max_pool": lambda r: (lambda x: T.sum(T.square(T.global_max_pool(x))), [r.normal(size=(5, 3))]),
    "dense": lambda r: (lambda x, w, b: T.sum(T.square(T.dense(x, w, b))),
                        [r.normal(size=4), r.normal(size=(3, 4)), r.normal(size=3)]),
    "dense_batch": lambda r: (lambda x, w, b: T.sum(T.square(T.dense(x, w, b))),
                              [r.normal(size=(2, 4)), r.normal(size=(3, 4)), r.normal(size=3)]),
    "l2_normalize": lambda r: (lambda x: T.sum(T.mul(T.l2_normalize(x), T.tensor(np.arange(1.0, 5.0)))),
                               [r.normal(size=4)]),
    "l2_normalize_rows": lambda r: (lambda x: T.sum(T.square(T.slice_rows(T.l2_normalize(x), 0, 1))),
                                    [r.normal(size=(3, 4))]),
    "embedding": lambda r: (lambda t: T.sum(T.square(T.embedding_lookup(t, [2, 0, 2]))), [r.normal(size=(3, 2))]),
    "cross_entropy": lambda r: (lambda z: T.cross_entropy(z, [1, 0, 2]), [r.normal(size=(3, 4))]),
    "rowdot_relu": lambda r: (lambda a, b: T.mean(T.relu(T.add(T.rowdot(a, b), 0.3))),
                              [r.normal(size=(4, 3)), r.normal(size=(4, 3))]),
    "concat_stack": lambda r: (lambda a, b: T.sum(T.square(T.concat([a, T.stack([b, b])]))),
                               [r.normal(size=(2, 3)), r.normal(size=3)]),
    "take_row": lambda r: (lambda t: T.sum(T.square(T.take_row(t, 1))), [r.normal(size=(3, 2))]),
    "dropout_fixed_mask": lambda r: (lambda x: T.sum(T.square(T.shared_mask_dropout(
        [x], 0.5, mask=np.array([2.0, 0.0, 2.0]))[0])), [r.normal(size=(2, 3))]),
}
