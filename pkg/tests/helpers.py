"""Shared builders: small experiments and gradient-check probes."""

import numpy as np

from evistream import numerics as nx
from evistream.config import ExperimentConfig
from evistream.data import SyntheticSpec
from evistream.encoder import EncoderConfig
from evistream.gradcheck import check_gradients
from evistream.harness import TrainConfig
from evistream.numerics import Tensor


def tiny_encoder():
    """Two-stage encoder on 16x16 images; cheap enough for finite differences."""
    return EncoderConfig(input_size=(16, 16), patch_size=4, embed_dim=8,
                         depths=[2, 2], heads=[1, 2], window=2, mlp_ratio=2.0)


def tiny_experiment(**kw):
    """A cohort and model small enough to run a full nested CV in seconds."""
    base = dict(
        synthetic=SyntheticSpec(subjects=20, min_slices=2, max_slices=4, image_size=16,
                                blob_radius=3.0, seed=4),
        encoder=tiny_encoder(),
        train=TrainConfig(max_epochs=2, patience=1),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


PRIMITIVES = {
    "matmul": lambda r: (lambda a, b: nx.tsum(nx.matmul(a, b) * nx.matmul(a, b)), [_leaf(r, 3, 4), _leaf(r, 4, 2)]),
    "batched_matmul": lambda r: (lambda a, b: nx.tsum(nx.gelu(nx.matmul(a, b))), [_leaf(r, 2, 3, 4), _leaf(r, 2, 4, 2)]),
    "add_broadcast": lambda r: (lambda a, b: nx.tsum((a + b) * (a + b)), [_leaf(r, 3, 4), _leaf(r, 4)]),
    "mul": lambda r: (lambda a, b: nx.tsum(a * b * a), [_leaf(r, 3, 2), _leaf(r, 3, 2)]),
    "softmax": lambda r: (lambda a, b: nx.tsum(nx.softmax(a, axis=-1) * b), [_leaf(r, 3, 4), _leaf(r, 3, 4)]),
    "log_softmax": lambda r: (lambda a, b: nx.tsum(nx.log_softmax(a, axis=-1) * b), [_leaf(r, 3, 4), _leaf(r, 3, 4)]),
    "layer_norm": lambda r: (lambda a, g, b: nx.tsum(nx.layer_norm(a, g, b) * nx.layer_norm(a, g, b) * a),
                             [_leaf(r, 3, 5), _leaf(r, 5), _leaf(r, 5)]),
    "gelu": lambda r: (lambda a: nx.tsum(nx.gelu(a) * a), [_leaf(r, 4, 3)]),
    "cross_entropy": lambda r: (lambda a: nx.cross_entropy_loss(a, 1), [_leaf(r, 3)]),
    "mean": lambda r: (lambda a: nx.tsum(nx.mean(a, axis=0) * nx.mean(a, axis=0)), [_leaf(r, 4, 3)]),
    "max": lambda r: (lambda a: nx.tsum(nx.tmax(a, axis=0) * nx.tmax(a, axis=0)), [_leaf(r, 4, 3)]),
    "reshape_transpose_roll": lambda r: (
        lambda a, b: nx.tsum(nx.roll(a.reshape(2, 2, 3).transpose(1, 0, 2), (1,), (1,)).reshape(4, 3) * b),
        [_leaf(r, 4, 3), _leaf(r, 4, 3)]),
    "getitem_concat": lambda r: (lambda a, b: nx.tsum(nx.concat([a[1:], b], axis=0) * nx.concat([a[1:], b], axis=0)),
                                 [_leaf(r, 3, 2), _leaf(r, 2, 2)]),
}


# relative-error tolerance and finite-difference settings per precision
GRADCHECK = {
    "float32": dict(step=1e-3, floor=1e-6, tol=1e-2),
    "float64": dict(step=1e-5, floor=1e-8, tol=1e-5),
}


def primitive_reports(name, precision, probes=20):
    """Gradient-check reports for one entry of :data:`PRIMITIVES`."""
    opts = GRADCHECK[precision]
    rng = np.random.default_rng(11)
    if precision == "float64":
        with nx.verification_mode():
            fn, leaves = PRIMITIVES[name](rng)
            params = {f"p{i}": t for i, t in enumerate(leaves)}
            return check_gradients(lambda: fn(*leaves), params, probes=probes, step=opts["step"],
                                   floor=opts["floor"], oracle64=False)
    fn, leaves = PRIMITIVES[name](rng)
    params = {f"p{i}": t for i, t in enumerate(leaves)}
    return check_gradients(lambda: fn(*leaves), params, probes=probes, step=opts["step"], floor=opts["floor"])
