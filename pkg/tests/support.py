"""Shared test helpers: the finite-difference sweep over every tape op.

The sweep is used twice: once by the unit tests (per-op assertions with
readable failures) and once by the acceptance suite (every op, three
random shapes each, fixed seed, one timed run).
"""

from __future__ import annotations

import numpy as np

from recx import diffarray as da


def _proj(rng, shape):
    """Fixed random projection turning an op output into a scalar."""
    w = rng.standard_normal(shape)

    def apply(t):
        return (t * da.tensor(w)).sum()

    return apply


def op_cases(seed: int = 1234):
    """Yield (name, fn, x0) triples; fn maps a leaf Tensor to a scalar Tensor.

    Three random shapes per op, deterministic for a given seed.  Inputs
    are conditioned per op (positive for log/sqrt, bounded denominators)
    so the central-difference oracle is accurate at h = 1e-5.
    """
    rng = np.random.default_rng(seed)
    shapes = [(5,), (3, 4), (2, 3, 4)]

    def rand(shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    for i, shape in enumerate(shapes):
        x0 = rand(shape)
        other = rand(shape)
        lead = rand(shape[1:]) if len(shape) > 1 else rand(())

        for name, fn in [
            ("add", lambda t, o=other: t + da.tensor(o)),
            ("add-broadcast", lambda t, o=lead: t + da.tensor(o)),
            ("sub", lambda t, o=other: t - da.tensor(o)),
            ("mul", lambda t, o=other: t * da.tensor(o)),
            ("div", lambda t, o=np.sign(other) * (np.abs(other) + 0.5): t / da.tensor(o)),
            ("rdiv", lambda t: 1.0 / (t * t + 1.0)),
            ("neg", lambda t: -t),
            ("pow", lambda t: (t * t + 0.5) ** 1.7),
            ("exp", lambda t: t.exp()),
            ("tanh", lambda t: t.tanh()),
            ("sigmoid", lambda t: t.sigmoid()),
            ("abs", lambda t: t.abs()),
            ("silu", lambda t: t.silu()),
            ("reshape", lambda t: t.reshape(-1)),
            ("getitem", lambda t: t[1:]),
            ("concat", lambda t, o=other: da.concat([t, da.tensor(o)], axis=0)),
            ("sum-axis", lambda t: t.sum(axis=0)),
            ("mean", lambda t: t.mean()),
            ("softmax", lambda t: t.softmax(axis=-1)),
            ("layernorm", lambda t: t.layernorm(axis=-1)),
        ]:
            proj = _proj(rng, _out_shape(fn, shape))
            yield f"{name}[{i}]", (lambda t, f=fn, p=proj: p(f(t))), x0

        xpos = rand(shape, 0.3, 2.5)
        for name, fn in [
            ("log", lambda t: t.log()),
            ("sqrt", lambda t: t.sqrt()),
        ]:
            proj = _proj(rng, shape)
            yield f"{name}[{i}]", (lambda t, f=fn, p=proj: p(f(t))), xpos

    # matmul: three shape triples, gradients through both operands
    for i, (m, k, n) in enumerate([(3, 4, 2), (2, 5, 3), (4, 3, 4)]):
        b = rng.standard_normal((k, n))
        proj = _proj(rng, (m, n))
        yield f"matmul-lhs[{i}]", (
            lambda t, b=b, p=proj: p(t @ da.tensor(b))
        ), rng.standard_normal((m, k))
        a = rng.standard_normal((m, k))
        yield f"matmul-rhs[{i}]", (
            lambda t, a=a, p=proj: p(da.tensor(a) @ t)
        ), rng.standard_normal((k, n))
    bat = rng.standard_normal((2, 4, 3))
    projb = _proj(rng, (2, 5, 3))
    yield "matmul-batched", (
        lambda t, b=bat, p=projb: p(t @ da.tensor(b))
    ), rng.standard_normal((2, 5, 4))

    # permute
    for i, shape in enumerate([(3, 4), (2, 3, 4), (2, 2, 3, 2)]):
        axes = tuple(reversed(range(len(shape))))
        proj = _proj(rng, tuple(reversed(shape)))
        yield f"permute[{i}]", (
            lambda t, a=axes, p=proj: p(t.permute(*a))
        ), rng.standard_normal(shape)

    # conv2d: gradients wrt input, weight, and bias; three geometries
    geoms = [
        dict(n=1, cin=2, h=6, w=6, cout=3, k=3, stride=1, padding=1),
        dict(n=2, cin=1, h=5, w=7, cout=2, k=3, stride=2, padding=0),
        dict(n=1, cin=3, h=4, w=4, cout=2, k=1, stride=1, padding=0),
    ]
    for i, g in enumerate(geoms):
        x = rng.standard_normal((g["n"], g["cin"], g["h"], g["w"]))
        w = rng.standard_normal((g["cout"], g["cin"], g["k"], g["k"])) * 0.5
        bias = rng.standard_normal(g["cout"])
        ho = (g["h"] + 2 * g["padding"] - g["k"]) // g["stride"] + 1
        wo = (g["w"] + 2 * g["padding"] - g["k"]) // g["stride"] + 1
        proj = _proj(rng, (g["n"], g["cout"], ho, wo))
        st, pd = g["stride"], g["padding"]
        yield f"conv2d-x[{i}]", (
            lambda t, w=w, b=bias, p=proj, st=st, pd=pd:
            p(t.conv2d(da.tensor(w), da.tensor(b), stride=st, padding=pd))
        ), x
        yield f"conv2d-w[{i}]", (
            lambda t, x=x, b=bias, p=proj, st=st, pd=pd:
            p(da.tensor(x).conv2d(t, da.tensor(b), stride=st, padding=pd))
        ), w
        yield f"conv2d-b[{i}]", (
            lambda t, x=x, w=w, p=proj, st=st, pd=pd:
            p(da.tensor(x).conv2d(da.tensor(w), t, stride=st, padding=pd))
        ), bias

    # pooling / upsampling
    for i, (n, c, h, w) in enumerate([(1, 2, 4, 4), (2, 1, 6, 6), (1, 3, 4, 8)]):
        x = rng.standard_normal((n, c, h, w))
        proj = _proj(rng, (n, c, h // 2, w // 2))
        yield f"avg_pool2d[{i}]", (lambda t, p=proj: p(t.avg_pool2d(2))), x
        proj2 = _proj(rng, (n, c, h * 2, w * 2))
        yield f"upsample2x[{i}]", (lambda t, p=proj2: p(t.upsample2x())), x

    # attention: gradients through q, k, v
    for i, (nq, nk, d) in enumerate([(3, 4, 5), (2, 6, 3), (4, 4, 4)]):
        q = rng.standard_normal((nq, d))
        k = rng.standard_normal((nk, d))
        v = rng.standard_normal((nk, d))
        proj = _proj(rng, (nq, d))
        yield f"attention-q[{i}]", (
            lambda t, k=k, v=v, p=proj: p(da.attention(t, da.tensor(k), da.tensor(v)))
        ), q
        yield f"attention-k[{i}]", (
            lambda t, q=q, v=v, p=proj: p(da.attention(da.tensor(q), t, da.tensor(v)))
        ), k
        yield f"attention-v[{i}]", (
            lambda t, q=q, k=k, p=proj: p(da.attention(da.tensor(q), da.tensor(k), t))
        ), v


def _out_shape(fn, in_shape):
    """Shape of fn applied to a zeros probe (ops are shape-deterministic)."""
    with da.no_grad():
        probe = fn(da.tensor(np.full(in_shape, 0.37)))
    return probe.shape


def run_gradient_sweep(seed: int = 1234, tol: float = 1e-6):
    """Run the oracle comparison for every case; return list of failures."""
    failures = []
    count = 0
    for name, fn, x0 in op_cases(seed):
        count += 1
        _, _, rel = da.check_gradient(fn, x0, h=1e-5)
        if not (rel < tol):
            failures.append((name, rel))
    return count, failures
