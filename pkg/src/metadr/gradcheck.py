"""Finite-difference verification of gradients and Hessian-vector products.

Everything here runs in float64. Analytic first-order gradients are checked
against central finite differences of the loss; HVPs are checked against
central finite differences of the (already verified) analytic gradient.

Random instances whose ReLU pre-activations come too close to the kink are
resampled and counted as excluded: the second derivative of ReLU is defined
as zero there, so finite differences straddling the kink are meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import ParamSet

__all__ = [
    "gradcheck",
    "GradcheckReport",
    "BlockResult",
    "random_instance",
    "composite_instance",
    "composite_check",
    "CompositeResult",
]

_KINK_MARGIN = 1e-3  # min |relu pre-activation| accepted for an instance
_EPS = 1e-4


@dataclass
class BlockResult:
    name: str
    max_rel_err_grad: float
    max_rel_err_hvp: float


@dataclass
class GradcheckReport:
    blocks: list = field(default_factory=list)
    tol_grad: float = 1e-5
    tol_hvp: float = 1e-4
    excluded_instances: int = 0
    instances: int = 0

    @property
    def max_grad_err(self) -> float:
        return max((b.max_rel_err_grad for b in self.blocks), default=0.0)

    @property
    def max_hvp_err(self) -> float:
        return max((b.max_rel_err_hvp for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_grad_err <= self.tol_grad and self.max_hvp_err <= self.tol_hvp

    def summary(self) -> str:
        lines = [
            f"gradcheck: {len(self.blocks)} blocks over {self.instances} instances "
            f"({self.excluded_instances} excluded at relu kinks)",
            f"  max grad rel err {self.max_grad_err:.3e} (tol {self.tol_grad:g})",
            f"  max hvp  rel err {self.max_hvp_err:.3e} (tol {self.tol_hvp:g})",
            f"  result: {'PASS' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case relative disagreement; coordinates below 1e-4 in magnitude
    are compared absolutely at 1e-8 (FD noise floor)."""
    a = a.ravel()
    b = b.ravel()
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.abs(a - b)
    big = scale >= 1e-4
    worst = 0.0
    if big.any():
        worst = float((err[big] / scale[big]).max())
    small = ~big
    if small.any() and err[small].max() > 1e-8:
        worst = max(worst, float(err[small].max() / 1e-4))
    return worst


def _flat(params: ParamSet) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in params.tensors()])

def _unflat(params: ParamSet, vec: np.ndarray) -> ParamSet:
    out = []
    i = 0
    for t in params.tensors():
        out.append(T.Tensor(vec[i : i + t.size].reshape(t.shape).copy(), True))
        i += t.size
    return params.replace(out)


def check_instance(params: ParamSet, loss_fn, eps: float = _EPS, fault_flip=False):
    """Compare analytic grad and HVP against finite differences for one
    model instance. loss_fn maps a ParamSet to a scalar Tensor."""
    theta0 = _flat(params)
    n = theta0.size

    def f(vec: np.ndarray) -> float:
        with T.no_grad():
            return float(loss_fn(_unflat(params, vec)).data)

    def analytic_grad(vec: np.ndarray) -> np.ndarray:
        ps = _unflat(params, vec)
        gs = T.grad(loss_fn(ps), ps.tensors())
        return np.concatenate([g.data.ravel() for g in gs])

    g_an = analytic_grad(theta0)
    if fault_flip:
        g_an = -g_an
    g_fd = np.empty(n)
    for i in range(n):
        up = theta0.copy()
        dn = theta0.copy()
        up[i] += eps
        dn[i] -= eps
        g_fd[i] = (f(up) - f(dn)) / (2 * eps)

    rng = np.random.default_rng(abs(hash(n)) % (2**32))
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    ps = _unflat(params, theta0)
    vs = []
    i = 0
    for t in ps.tensors():
        vs.append(T.Tensor(v[i : i + t.size].reshape(t.shape)))
        i += t.size
    hv_an = np.concatenate(
        [h.data.ravel() for h in T.hvp(loss_fn(ps), ps.tensors(), vs)]
    )
    if fault_flip:
        hv_an = -hv_an
    hv_fd = (analytic_grad(theta0 + eps * v) - analytic_grad(theta0 - eps * v)) / (
        2 * eps
    )
    return g_an, g_fd, hv_an, hv_fd


def random_instance(kind: str, rng: np.random.Generator):
    """Build a small random f64 model instance: (params, loss_fn) or None
    when a relu pre-activation falls within the kink margin."""
    if kind == "mlp":
        din, dh, dc, nb = 5, 4, 3, 4
        x = T.Tensor(rng.standard_normal((nb, din)))
        y = rng.integers(0, dc, nb)
        w1 = T.Tensor(rng.standard_normal((din, dh)) / np.sqrt(din), True)
        b1 = T.Tensor(rng.standard_normal(dh) * 0.1, True)
        w2 = T.Tensor(rng.standard_normal((dh, dc)) / np.sqrt(dh), True)
        b2 = T.Tensor(rng.standard_normal(dc) * 0.1, True)
        params = ParamSet(zip(["w1", "b1", "w2", "b2"], [w1, b1, w2, b2]))

        def loss_fn(ps: ParamSet):
            h = T.relu(T.bias_add(T.matmul(x, ps["w1"]), ps["b1"]))
            return T.softmax_cross_entropy(
                T.bias_add(T.matmul(h, ps["w2"]), ps["b2"]), y
            )

        def preacts(ps: ParamSet):
            return T.bias_add(T.matmul(x, ps["w1"]), ps["b1"]).data

    elif kind == "cnn":
        nb, c, h, dc = 2, 1, 6, 3
        x = T.Tensor(rng.standard_normal((nb, c, h, h)))
        y = rng.integers(0, dc, nb)
        wc = T.Tensor(rng.standard_normal((2, c, 3, 3)) / 3.0, True)
        bc = T.Tensor(rng.standard_normal(2) * 0.1, True)
        dflat = 2 * 2 * 2
        wd = T.Tensor(rng.standard_normal((dflat, dc)) / np.sqrt(dflat), True)
        bd = T.Tensor(rng.standard_normal(dc) * 0.1, True)
        params = ParamSet(zip(["wc", "bc", "wd", "bd"], [wc, bc, wd, bd]))

        def conv_part(ps: ParamSet):
            z = T.conv2d(x, ps["wc"])
            zb = T.add(
                z, T.broadcast_to(T.reshape(ps["bc"], (1, 2, 1, 1)), z.shape)
            )
            return zb

        def loss_fn(ps: ParamSet):
            a = T.maxpool2d(T.relu(conv_part(ps)))
            return T.softmax_cross_entropy(
                T.bias_add(T.matmul(T.flatten(a), ps["wd"]), ps["bd"]), y
            )

        def preacts(ps: ParamSet):
            z = conv_part(ps).data
            # Near-ties inside a pooling window are kinks of the max: the
            # selected element flips under an FD perturbation. Report the
            # window top-2 gap alongside the relu margin.
            zr = T.relu(T.Tensor(z)).data
            n_, c_, hh, ww = zr.shape
            win = (
                zr[:, :, : hh // 2 * 2, : ww // 2 * 2]
                .reshape(n_, c_, hh // 2, 2, ww // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n_, c_, hh // 2, ww // 2, 4)
            )
            top2 = np.sort(win, axis=-1)[..., -2:]
            gaps = top2[..., 1] - top2[..., 0]
            # Ties at exactly zero (dead relu units) carry no gradient
            # either way; only near-ties between live values matter.
            live = top2[..., 0] > 0
            gap = gaps[live].min() if live.any() else np.inf
            return z if gap >= _KINK_MARGIN else np.zeros(1)

    else:
        raise ValueError(f"unknown instance kind: {kind!r}")

    with T.no_grad():
        if np.abs(preacts(params)).min() < _KINK_MARGIN:
            return None
    return params, loss_fn


def composite_instance(seed: int = 0, alpha: float = 0.1, beta: float = 1.0,
                       gamma: float = 1.0):
    """A 15-parameter logistic model over 2x2 single-channel images with
    fixed batches and a fixed composed transform. Returns (params,
    objective_fn) where objective_fn maps a ParamSet to the scalar
    task + beta*retention + gamma*adaptation objective, with the retention
    and adaptation terms evaluated at the one-inner-step parameters."""
    from .transforms import ComposedTransform, apply_transform

    rng = np.random.default_rng(seed)
    nb, h, k = 4, 2, 3
    x = rng.uniform(0.0, 255.0, size=(nb, h, h, 1))
    y = rng.integers(0, k, nb)
    xh = rng.uniform(0.0, 255.0, size=(nb, h, h, 1))
    yh = rng.integers(0, k, nb)
    ct = ComposedTransform((("brightness", 1.4, None), ("contrast", 0.6, None)))
    tx = np.stack([apply_transform(ct, im) for im in x])
    txh = np.stack([apply_transform(ct, im) for im in xh])
    feats = {n: a.reshape(nb, -1) / 255.0 for n, a in
             (("x", x), ("tx", tx), ("txh", txh))}

    w = T.Tensor(rng.standard_normal((h * h, k)) * 0.5, True)
    b = T.Tensor(rng.standard_normal(k) * 0.1, True)
    params = ParamSet(zip(["w", "b"], [w, b]))

    def logits(ps: ParamSet, f: np.ndarray) -> T.Tensor:
        return T.bias_add(T.matmul(T.Tensor(f), ps["w"]), ps["b"])

    def objective(ps: ParamSet) -> T.Tensor:
        total = T.softmax_cross_entropy(logits(ps, feats["x"]), y)
        if beta == 0.0 and gamma == 0.0:
            return total
        inner = T.softmax_cross_entropy(logits(ps, feats["txh"]), yh)
        gs = T.grad(inner, ps.tensors(), create_graph=True)
        th = ps.replace(
            [T.sub(p, T.scalar_mul(alpha, g)) for p, g in zip(ps.tensors(), gs)]
        )
        if beta != 0.0:
            recall = T.softmax_cross_entropy(logits(th, feats["x"]), y)
            total = T.add(total, T.scalar_mul(beta, recall))
        if gamma != 0.0:
            adapt = T.softmax_cross_entropy(logits(th, feats["tx"]), y)
            total = T.add(total, T.scalar_mul(gamma, adapt))
        return total

    return params, objective


@dataclass
class CompositeResult:
    rel_err: float
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.tol

    def summary(self) -> str:
        return (
            f"composite objective: max grad rel err {self.rel_err:.3e} "
            f"(tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}"
        )


def composite_check(seed: int = 0, alpha: float = 0.1, beta: float = 1.0,
                    gamma: float = 1.0, tol: float = 1e-5) -> CompositeResult:
    """Check the analytic gradient of the composite meta objective against
    central finite differences of its scalar value."""
    params, objective = composite_instance(seed, alpha, beta, gamma)
    theta0 = _flat(params)

    def f(vec: np.ndarray) -> float:
        return float(objective(_unflat(params, vec)).data)

    ps = _unflat(params, theta0)
    gs = T.grad(objective(ps), ps.tensors())
    g_an = np.concatenate([g.data.ravel() for g in gs])
    g_fd = np.empty_like(theta0)
    for i in range(theta0.size):
        up, dn = theta0.copy(), theta0.copy()
        up[i] += _EPS
        dn[i] -= _EPS
        g_fd[i] = (f(up) - f(dn)) / (2 * _EPS)
    return CompositeResult(rel_err=_rel_err(g_an, g_fd), tol=tol)


def gradcheck(
    n_instances: int = 50,
    tol_grad: float = 1e-5,
    tol_hvp: float = 1e-4,
    seed: int = 0,
    fault_flip: bool = False,
) -> GradcheckReport:
    """Run grad + HVP finite-difference checks over random MLP and CNN
    instances. ``fault_flip`` flips analytic signs (negative control)."""
    report = GradcheckReport(tol_grad=tol_grad, tol_hvp=tol_hvp)
    rng = np.random.default_rng(seed)
    kinds = ["mlp", "cnn"]
    done = 0
    while done < n_instances:
        kind = kinds[done % 2]
        inst = random_instance(kind, rng)
        if inst is None:
            report.excluded_instances += 1
            continue
        params, loss_fn = inst
        g_an, g_fd, hv_an, hv_fd = check_instance(
            params, loss_fn, fault_flip=fault_flip
        )
        report.blocks.append(
            BlockResult(
                name=f"{kind}[{done}]",
                max_rel_err_grad=_rel_err(g_an, g_fd),
                max_rel_err_hvp=_rel_err(hv_an, hv_fd),
            )
        )
        done += 1
    report.instances = done
    return report
