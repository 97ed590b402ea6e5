"""Central finite-difference verification of every differentiable operation.

Each check builds a scalar loss from one operation (weighted by a fixed
random matrix so the whole Jacobian is exercised), runs the tape backward,
and re-evaluates the loss forward-only while perturbing one input element
at a time. The forward re-evaluations never touch a tape, so the numeric
side is independent of the reverse-mode path it verifies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-5
OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
_REL_FLOOR = 1e-3  # below this magnitude the comparison is effectively absolute


def numerical_gradient(f: Callable[[], float], tensor: ad.Tensor, step: float = FD_STEP) -> np.ndarray:
    """Central differences of f with respect to every element of ``tensor``."""
    base = tensor.data
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = base[idx]
        base[idx] = saved + step
        up = f()
        base[idx] = saved - step
        down = f()
        base[idx] = saved
        grad[idx] = (up - down) / (2.0 * step)
        it.iternext()
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    build_loss: Callable[[], ad.Tensor],
    params: Sequence[ad.Tensor],
    step: float = FD_STEP,
    corrupt: bool = False,
) -> float:
    """Max relative error between tape gradients and finite differences.

    ``corrupt=True`` deliberately offsets one analytic gradient before the
    comparison; it exists so the harness can prove it catches bad gradients.
    """
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    if corrupt and analytic:
        analytic[0] = analytic[0] + 1e-2
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_gradient(lambda: build_loss().item(), p, step)
        worst = max(worst, max_relative_error(a, n))
    for p in params:
        p.grad = None
    return worst


def _away_from(values: np.ndarray, point: float, margin: float) -> np.ndarray:
    """Push values out of a margin around a non-differentiable point."""
    close = np.abs(values - point) < margin
    return np.where(close, values + np.sign(values - point + 1e-9) * margin, values)


def _weighted(x: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    return ad.sum_all(ad.mul(x, ad.Tensor(weights)))


@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _op_cases(rng: np.random.Generator):
    """Yield (name, build_loss, params) triples for every differentiable op."""

    def rand(*shape):
        return rng.uniform(-2.0, 2.0, size=shape)

    cases = []

    a = ad.Tensor(rand(3, 4), requires_grad=True)
    b = ad.Tensor(rand(4, 2), requires_grad=True)
    w = rand(3, 2)
    cases.append(("matmul", lambda: _weighted(ad.matmul(a, b), w), [a, b]))

    x1 = ad.Tensor(rand(3, 4), requires_grad=True)
    v1 = ad.Tensor(rand(4), requires_grad=True)
    w1 = rand(3, 4)
    cases.append(("add", lambda: _weighted(ad.add(x1, v1), w1), [x1, v1]))

    x2 = ad.Tensor(rand(3, 4), requires_grad=True)
    y2 = ad.Tensor(rand(3, 4), requires_grad=True)
    w2 = rand(3, 4)
    cases.append(("sub", lambda: _weighted(ad.sub(x2, y2), w2), [x2, y2]))

    x3 = ad.Tensor(rand(3, 4), requires_grad=True)
    y3 = ad.Tensor(rand(3, 4), requires_grad=True)
    w3 = rand(3, 4)
    cases.append(("mul", lambda: _weighted(ad.mul(x3, y3), w3), [x3, y3]))

    x4 = ad.Tensor(rand(3, 4), requires_grad=True)
    w4 = rand(3, 4)
    cases.append(("scale", lambda: _weighted(ad.scale(x4, -1.7), w4), [x4]))

    x5 = ad.Tensor(rand(3, 4), requires_grad=True)
    w5 = rand(3, 4)
    cases.append(("exp", lambda: _weighted(ad.exp(x5), w5), [x5]))

    x6 = ad.Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    w6 = rand(3, 4)
    cases.append(("log", lambda: _weighted(ad.log(x6), w6), [x6]))

    x7 = ad.Tensor(_away_from(rand(3, 4), 0.0, 1e-3), requires_grad=True)
    w7 = rand(3, 4)
    cases.append(("relu", lambda: _weighted(ad.relu(x7), w7), [x7]))

    x8 = ad.Tensor(rand(3, 5), requires_grad=True)
    w8 = rand(3, 5)
    cases.append(("softmax_rows", lambda: _weighted(ad.softmax_rows(x8), w8), [x8]))

    x9 = ad.Tensor(rand(3, 8), requires_grad=True)
    g9 = ad.Tensor(rand(8), requires_grad=True)
    b9 = ad.Tensor(rand(8), requires_grad=True)
    w9 = rand(3, 8)
    cases.append(
        ("layer_norm", lambda: _weighted(ad.layer_norm(x9, g9, b9, eps=1e-6), w9), [x9, g9, b9])
    )

    pool_data = rand(3, 5)
    # separate entries so no two candidates tie at any position
    pool_data += np.arange(15).reshape(3, 5) * 1e-2
    pool = [ad.Tensor(pool_data[i], requires_grad=True) for i in range(3)]
    wp = rand(5)
    cases.append(("max_pool_rows", lambda: _weighted(ad.max_pool_rows(pool), wp), pool))

    logits = rand(3, 4)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    p10 = ad.Tensor(probs, requires_grad=True)
    y10 = np.zeros((3, 4))
    y10[np.arange(3), rng.integers(0, 4, size=3)] = 1.0
    y10 = ad.Tensor(y10)
    cases.append(("cross_entropy_rows", lambda: ad.cross_entropy_rows(p10, y10), [p10]))

    a11 = ad.Tensor(rand(6) + 0.1, requires_grad=True)
    b11 = ad.Tensor(rand(6) + 0.1, requires_grad=True)
    cases.append(("cosine_sim", lambda: ad.cosine_sim(a11, b11), [a11, b11]))

    x12 = ad.Tensor(rand(5, 3), requires_grad=True)
    idx12 = [0, 2, 2, 4]
    w12 = rand(4, 3)
    cases.append(("gather_rows", lambda: _weighted(ad.gather_rows(x12, idx12), w12), [x12]))

    vecs = [ad.Tensor(rand(4), requires_grad=True) for _ in range(3)]
    w13 = rand(3, 4)
    cases.append(("stack_rows", lambda: _weighted(ad.stack_rows(vecs), w13), vecs))

    mats = [ad.Tensor(rand(3, 2), requires_grad=True) for _ in range(2)]
    w14 = rand(3, 4)
    cases.append(("concat_cols", lambda: _weighted(ad.concat_cols(mats), w14), mats))

    x15 = ad.Tensor(rand(3, 4), requires_grad=True)
    w15 = rand(2, 6)
    cases.append(("reshape", lambda: _weighted(ad.reshape(x15, (2, 6)), w15), [x15]))

    x16 = ad.Tensor(rand(3, 4), requires_grad=True)
    w16 = rand(4, 3)
    cases.append(("transpose", lambda: _weighted(ad.transpose(x16), w16), [x16]))

    x17 = ad.Tensor(rand(4, 3), requires_grad=True)
    w17 = rand(3)
    cases.append(("mean_rows", lambda: _weighted(ad.mean_rows(x17), w17), [x17]))

    x18 = ad.Tensor(rand(3, 4), requires_grad=True)
    cases.append(("sum_all", lambda: ad.sum_all(x18), [x18]))

    # a tensor feeding two branches: backward must sum both contributions
    x19 = ad.Tensor(rand(3, 3), requires_grad=True)
    m19 = ad.Tensor(rand(3, 3), requires_grad=True)

    def reuse_loss():
        branch1 = ad.sum_all(ad.mul(x19, x19))
        branch2 = ad.sum_all(ad.softmax_rows(ad.matmul(x19, m19)))
        return ad.add(branch1, branch2)

    cases.append(("shared_input", reuse_loss, [x19, m19]))

    # a deeper composition mixing most ops
    xa = ad.Tensor(rand(2, 6), requires_grad=True)
    wa = ad.Tensor(rand(6, 6), requires_grad=True)
    ga = ad.Tensor(rand(6) * 0.1 + 1.0, requires_grad=True)
    ba = ad.Tensor(rand(6) * 0.1, requires_grad=True)
    ya = np.zeros((2, 6))
    ya[np.arange(2), rng.integers(0, 6, size=2)] = 1.0
    ya = ad.Tensor(ya)

    def composed_loss():
        h = ad.relu(ad.matmul(xa, wa))
        h = ad.layer_norm(h, ga, ba, eps=1e-6)
        p = ad.softmax_rows(h)
        return ad.cross_entropy_rows(p, ya)

    cases.append(("composed_graph", composed_loss, [xa, wa, ga, ba]))

    return cases


def run_op_suite(seed: int = 0, corrupt_op: str | None = None) -> list[OpCheck]:
    """Finite-difference check of every differentiable op at OP_TOLERANCE."""
    rng = np.random.default_rng(seed)
    results = []
    for name, build_loss, params in _op_cases(rng):
        err = check_gradients(build_loss, params, corrupt=(name == corrupt_op))
        results.append(OpCheck(name, err, OP_TOLERANCE))
    return results


def run_end_to_end_check(seed: int = 0, n_samples: int = 50) -> OpCheck:
    """Finite differences on randomly sampled parameters of the full model loss.

    Builds a tiny two-study batch, computes the mixed training objective, and
    compares the tape gradient of ``n_samples`` randomly chosen parameter
    elements against central differences.
    """
    from . import training

    rng = np.random.default_rng(seed)
    setup = training.build_gradcheck_problem(seed)
    params = setup.named_params
    build_loss = setup.build_loss

    for p in params.values():
        p.grad = None
    with ad.Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    names = sorted(params)
    flat_index = []
    for name in names:
        for i in range(params[name].data.size):
            flat_index.append((name, i))
    chosen = rng.choice(len(flat_index), size=min(n_samples, len(flat_index)), replace=False)

    worst = 0.0
    for c in chosen:
        name, i = flat_index[int(c)]
        tensor = params[name]
        flat = tensor.data.reshape(-1)
        saved = flat[i]
        flat[i] = saved + FD_STEP
        up = build_loss().item()
        flat[i] = saved - FD_STEP
        down = build_loss().item()
        flat[i] = saved
        numeric = (up - down) / (2.0 * FD_STEP)
        a = analytic[name].reshape(-1)[i]
        denom = max(abs(a), abs(numeric), _REL_FLOOR)
        worst = max(worst, abs(a - numeric) / denom)
    for p in params.values():
        p.grad = None
    return OpCheck("end_to_end_total_loss", worst, END_TO_END_TOLERANCE)
