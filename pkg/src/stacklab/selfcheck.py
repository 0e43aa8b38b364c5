"""Finite-difference gradient checks and naive-loop reference implementations.

Everything here runs at float64. ``run_all`` is what ``stacklab selfcheck``
executes; the test suite reuses the same checks.
"""

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .conditioning import CaParams, ca_forward, kl_per_sample
from .config import ArchConfig
from .gan_stage1 import Stage1Discriminator, Stage1Generator, stage1_d_loss, stage1_g_loss
from .gan_stage2 import Stage2Discriminator, Stage2Generator, stage2_d_loss, stage2_g_loss
from .rng import derive_rng

H = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7
INSTANCES = 20


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    passed: bool
    seconds: float = 0.0
    max_abs_error: float = 0.0

    def to_dict(self):
        return asdict(self)


_worst_abs = [0.0]


def _compare(analytic, numeric):
    """Max relative error over entries whose absolute error exceeds the floor."""
    diff = np.abs(analytic - numeric)
    if diff.size:
        _worst_abs[0] = max(_worst_abs[0], float(diff.max()))
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= ABS_FLOOR, 0.0, diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def _take_abs():
    v, _worst_abs[0] = _worst_abs[0], 0.0
    return v


def numeric_grad(f, arr, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + H
        fp = f()
        flat[i] = old - H
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * H))
    return np.array(out)


def check_function(build, inputs, coords_per_input=None):
    """Compare backprop gradients of ``build(*tensors)`` with central differences.

    ``inputs`` is a list of float64 arrays; all of them receive gradients.
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in inputs]
    loss = build(*tensors)
    T.backward(loss)
    worst = 0.0
    for k, t in enumerate(tensors):
        coords = None if coords_per_input is None else coords_per_input[k]

        def f():
            with T.no_grad():
                return float(build(*[T.Tensor(a) for a in inputs]).data)

        num = numeric_grad(f, inputs[k], coords)
        ana = t.grad.reshape(-1)
        ana = ana if coords is None else ana[list(coords)]
        worst = max(worst, _compare(ana, num))
    return worst


def _weighted(out, w):
    """Scalar reduction <out, w> so every output entry gets a distinct weight."""
    return T.sum_(T.mul(out, T.Tensor(w)))


def _away_from(rng, shape, points=(0.0,), margin=1e-2):
    x = rng.normal(0.0, 1.0, size=shape)
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, x + np.sign(x - p + 1e-300) * 2 * margin, x)
    return x


def _op_cases():
    """(name, instance factory). A factory returns (build, inputs)."""
    cases = []

    def elementwise(fn, positive=False, kink=False):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
            x = np.abs(rng.normal(size=shape)) + 0.2 if positive else (
                _away_from(rng, shape) if kink else rng.normal(size=shape))
            w = rng.normal(size=shape)
            return (lambda a: _weighted(fn(a), w)), [x]
        return make

    cases += [
        ("square", elementwise(T.square)),
        ("exp", elementwise(T.exp)),
        ("log", elementwise(T.log, positive=True)),
        ("relu", elementwise(T.relu, kink=True)),
        ("leaky_relu", elementwise(lambda a: T.leaky_relu(a, 0.2), kink=True)),
        ("tanh", elementwise(T.tanh)),
        ("sigmoid", elementwise(T.sigmoid)),
        ("log_sigmoid", elementwise(lambda a: T.log_sigmoid(a * 3.0))),
    ]

    def binary(fn):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=3))
            bshape = tuple(s if rng.random() < 0.5 else 1 for s in shape)
            w = rng.normal(size=shape)
            return (lambda a, b: _weighted(fn(a, b), w)), [rng.normal(size=shape), rng.normal(size=bshape)]
        return make

    cases += [("add", binary(T.add)), ("sub", binary(T.sub)), ("mul", binary(T.mul))]

    def reduce_case(fn):
        def make(rng):
            shape = tuple(rng.integers(1, 5, size=3))
            axis = [None, 0, 1, 2][rng.integers(0, 4)]
            out_shape = np.sum(np.zeros(shape), axis=axis).shape
            w = rng.normal(size=out_shape)
            return (lambda a: _weighted(fn(a, axis), w)), [rng.normal(size=shape)]
        return make

    cases += [("sum", reduce_case(T.sum_)), ("mean", reduce_case(T.mean))]

    def reshape_make(rng):
        shape = tuple(rng.integers(1, 5, size=3))
        new = (shape[0] * shape[1], shape[2])
        w = rng.normal(size=new)
        return (lambda a: _weighted(T.reshape(a, new), w)), [rng.normal(size=shape)]

    def getitem_make(rng):
        n = int(rng.integers(2, 6))
        idx = rng.integers(0, n, size=n + 2)  # repeats exercise accumulation
        w = rng.normal(size=(n + 2, 3))
        return (lambda a: _weighted(T.getitem(a, idx), w)), [rng.normal(size=(n, 3))]

    def concat_make(rng):
        n, h = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        c1, c2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = rng.normal(size=(n, c1 + c2, h, h))
        return (lambda a, b: _weighted(T.concat_channels(a, b), w)), [
            rng.normal(size=(n, c1, h, h)), rng.normal(size=(n, c2, h, h))]

    def replicate_make(rng):
        n, c, h = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        w = rng.normal(size=(n, c, h, h))
        return (lambda a: _weighted(T.replicate_spatial(a, h, h), w)), [rng.normal(size=(n, c))]

    def dense_make(rng):
        n, fi, fo = (int(v) for v in rng.integers(1, 6, size=3))
        w = rng.normal(size=(n, fo))
        return (lambda x, wt, b: _weighted(T.dense(x, wt, b), w)), [
            rng.normal(size=(n, fi)), rng.normal(size=(fo, fi)), rng.normal(size=fo)]

    def conv_make(rng):
        n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 2, 3, 4]))
        s = int(rng.choice([1, 2]))
        p = int(rng.integers(0, k))
        hgt = int(rng.integers(max(k - 2 * p, 1), 7))
        ho = T.conv_output_size(hgt, k, s, p)
        w = rng.normal(size=(n, co, ho, ho))
        return (lambda x, kern, b: _weighted(T.conv2d(x, kern, b, s, p), w)), [
            rng.normal(size=(n, ci, hgt, hgt)), rng.normal(size=(co, ci, k, k)), rng.normal(size=co)]

    def upsample_make(rng):
        n, c, h, k = (int(v) for v in rng.integers(1, 4, size=4))
        w = rng.normal(size=(n, c, h * k, h * k))
        return (lambda x: _weighted(T.nearest_upsample(x, k), w)), [rng.normal(size=(n, c, h, h))]

    def bn_make(training):
        def make(rng):
            four = rng.random() < 0.5
            c = int(rng.integers(1, 4))
            shape = (int(rng.integers(2, 4)), c) + ((int(rng.integers(1, 4)),) * 2 if four else ())
            w = rng.normal(size=shape)
            rm, rv = rng.normal(size=c), rng.random(c) + 0.5

            def build(x, g, b):
                return _weighted(T.batch_norm(x, g, b, training, rm.copy(), rv.copy()), w)
            return build, [rng.normal(size=shape) * 2 + 1, rng.normal(size=c), rng.normal(size=c)]
        return make

    def log_softmax_make(rng):
        n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        w = rng.normal(size=(n, c))
        return (lambda x: _weighted(T.log_softmax(x), w)), [rng.normal(size=(n, c))]

    def ce_make(rng):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        labels = rng.integers(0, c, size=n)
        return (lambda x: T.cross_entropy(x, labels)), [rng.normal(size=(n, c))]

    def composite_make(rng):
        n, c = 2, int(rng.integers(1, 3))
        x = rng.normal(size=(n, c, 4, 4))
        k = rng.normal(size=(2, c, 3, 3))
        b = rng.normal(size=2)
        g, be = rng.normal(size=2), rng.normal(size=2)

        def build(x_, k_, b_, g_, be_):
            h = T.batch_norm(T.conv2d(x_, k_, b_, 1, 1), g_, be_, True)
            return T.sum_(T.relu(h))
        # keep ReLU inputs clear of the kink
        with T.no_grad():
            pre = T.batch_norm(T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), 1, 1),
                               T.Tensor(g), T.Tensor(be), True).data
        if np.abs(pre).min() < 1e-3:
            return composite_make(rng)
        return build, [x, k, b, g, be]

    def ca_make(rng):
        n, d, ng = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        eps = rng.normal(size=(n, ng))
        w = rng.normal(size=(n, ng))

        def build(phi, wt, b):
            h = T.dense(phi, wt, b)
            mu, ls = T.getitem(h, (slice(None), slice(0, ng))), T.getitem(h, (slice(None), slice(ng, 2 * ng)))
            c = T.add(mu, T.mul(T.exp(ls), T.Tensor(eps)))
            kl = T.mean(T.mul(T.sum_(T.sub(T.add(T.square(mu), T.exp(T.mul(ls, 2.0))), T.add(T.mul(ls, 2.0), 1.0)),
                                     axis=1), 0.5))
            return T.add(_weighted(c, w), kl)
        return build, [rng.normal(size=(n, d)), rng.normal(size=(2 * ng, d)) * 0.3, rng.normal(size=2 * ng) * 0.3]

    cases += [
        ("reshape", reshape_make), ("getitem", getitem_make), ("concat_channels", concat_make),
        ("replicate_spatial", replicate_make), ("dense", dense_make), ("conv2d", conv_make),
        ("nearest_upsample", upsample_make), ("batch_norm_train", bn_make(True)),
        ("batch_norm_eval", bn_make(False)), ("log_softmax", log_softmax_make),
        ("cross_entropy", ce_make), ("conv_bn_relu", composite_make), ("ca_kl", ca_make),
    ]
    return cases


def check_ops(seed=0, instances=INSTANCES):
    results = []
    for k, (name, make) in enumerate(_op_cases()):
        rng = derive_rng(seed, 100, k)
        t0 = time.perf_counter()
        worst = 0.0
        _take_abs()
        for _ in range(instances):
            build, inputs = make(rng)
            worst = max(worst, check_function(build, inputs))
        results.append(CheckResult(name, instances, worst, worst <= REL_TOL, time.perf_counter() - t0,
                                   _take_abs()))
    return results


# ------------------------------------------------------------- stage losses


def tiny_arch():
    return ArchConfig(n_g=3, n_z=4, n_d=3, m_d=2, m_g=2, w0=8, h0=8, w=16, h=16, base_channels=2, embed_dim=6)


def _param_check(loss_fn, params, rng, n_coords=3):
    """Gradient check of ``loss_fn()`` over a random coordinate subset of each parameter."""
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for p in params:
        coords = rng.choice(p.data.size, size=min(n_coords, p.data.size), replace=False)

        def f():
            with T.no_grad():
                return float(loss_fn().data)

        num = numeric_grad(f, p.data, coords)
        ana = p.grad.reshape(-1)[coords] if p.grad is not None else np.zeros(len(coords))
        worst = max(worst, _compare(ana, num))
    return worst


def _rescale(rng, *modules):
    """Redraw weights at O(1) scale so activations sit well away from ReLU kinks.

    With the 0.02 training init the tiny networks produce near-zero images, and
    a 1e-5 finite-difference step then straddles LeakyReLU kinks.
    """
    for m in modules:
        for name, p in m.named_parameters():
            if name.endswith("gamma"):
                p.data = 1.0 + 0.2 * rng.normal(size=p.shape)
            else:
                p.data = 0.4 * rng.normal(size=p.shape)


def _loss_instances(stage, which, seed, instances):
    arch = tiny_arch()
    worst = 0.0
    for i in range(instances):
        rng = derive_rng(seed, 200, stage, which == "g", i)
        n = 3
        phi = rng.normal(size=(n, arch.embed_dim))
        phi_wrong = np.roll(phi, 1, axis=0)
        eps = rng.normal(size=(n, arch.n_g))
        lam = float(rng.uniform(0.5, 2.0))
        if stage == 1:
            g = Stage1Generator(arch, rng, np.float64)
            d = Stage1Discriminator(arch, rng, np.float64)
            _rescale(rng, g, d)
            real = rng.uniform(-1, 1, size=(n, 3, arch.w0, arch.w0))
            z = rng.normal(size=(n, arch.n_z))
            if which == "d":
                fake = g(z, phi, eps)[0].detach()
                fn = lambda: stage1_d_loss(real, fake, phi, phi_wrong, d)  # noqa: E731
                params = list(d.parameters().values())
            else:
                fn = lambda: stage1_g_loss(z, phi, eps, g, d, lam)[0]  # noqa: E731
                params = list(g.parameters().values())
        else:
            g = Stage2Generator(arch, rng, np.float64)
            d = Stage2Discriminator(arch, rng, np.float64)
            _rescale(rng, g, d)
            real = rng.uniform(-1, 1, size=(n, 3, arch.w, arch.w))
            s0 = rng.uniform(-1, 1, size=(n, 3, arch.w0, arch.w0))
            if which == "d":
                fake = g(s0, phi, eps)[0].detach()
                fn = lambda: stage2_d_loss(real, fake, phi, phi_wrong, d)  # noqa: E731
                params = list(d.parameters().values())
            else:
                fn = lambda: stage2_g_loss(s0, phi, eps, g, d, lam)[0]  # noqa: E731
                params = list(g.parameters().values())
        worst = max(worst, _param_check(fn, params, rng))
    return worst


def check_losses(seed=0, instances=INSTANCES):
    results = []
    for stage in (1, 2):
        for which in ("d", "g"):
            t0 = time.perf_counter()
            _take_abs()
            worst = _loss_instances(stage, which, seed, instances)
            results.append(CheckResult(f"stage{stage}_{which}_loss", instances, worst, worst <= REL_TOL,
                                       time.perf_counter() - t0, _take_abs()))
    return results


# --------------------------------------------------------- naive references


def naive_conv2d(x, k, b, stride, pad):
    n, c, h, w = x.shape
    co, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r, q = y * stride + u - pad, xx * stride + v - pad
                                if 0 <= r < h and 0 <= q < w:
                                    acc += x[i, ch, r, q] * k[o, ch, u, v]
                    out[i, o, y, xx] = acc
    return out


def naive_dense(x, w, b):
    n, fi = x.shape
    out = np.zeros((n, w.shape[0]))
    for i in range(n):
        for o in range(w.shape[0]):
            acc = b[o]
            for j in range(fi):
                acc += w[o, j] * x[i, j]
            out[i, o] = acc
    return out


def naive_batch_norm(x, gamma, beta, eps=1e-5):
    """Train-mode normalization with the biased variance, by explicit loops."""
    out = np.empty_like(x)
    c = x.shape[1]
    for ch in range(c):
        vals = x[:, ch].reshape(-1)
        m = 0.0
        for v in vals:
            m += v
        m /= len(vals)
        var = 0.0
        for v in vals:
            var += (v - m) ** 2
        var /= len(vals)
        out[:, ch] = (x[:, ch] - m) / np.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def check_oracles(seed=0, instances=INSTANCES):
    rng = derive_rng(seed, 300)
    errs = {"conv2d_oracle": 0.0, "dense_oracle": 0.0, "batch_norm_oracle": 0.0}
    t0 = time.perf_counter()
    for _ in range(instances):
        n, c, co = (int(v) for v in rng.integers(1, 4, size=3))
        k, s = int(rng.choice([1, 3, 4])), int(rng.choice([1, 2]))
        p = int(rng.integers(0, k))
        h = int(rng.integers(max(k - 2 * p, 1), 8))
        x, kern, b = rng.normal(size=(n, c, h, h)), rng.normal(size=(co, c, k, k)), rng.normal(size=co)
        got = T.conv2d(T.Tensor(x), T.Tensor(kern), T.Tensor(b), s, p).data
        errs["conv2d_oracle"] = max(errs["conv2d_oracle"], float(np.abs(got - naive_conv2d(x, kern, b, s, p)).max()))

        fi, fo = (int(v) for v in rng.integers(1, 8, size=2))
        x, w, b = rng.normal(size=(n + 1, fi)), rng.normal(size=(fo, fi)), rng.normal(size=fo)
        got = T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        errs["dense_oracle"] = max(errs["dense_oracle"], float(np.abs(got - naive_dense(x, w, b)).max()))

        shape = (n + 1, c, h, h) if rng.random() < 0.5 else (n + 1, c)
        x, g, be = rng.normal(size=shape) * 3 + 1, rng.normal(size=c), rng.normal(size=c)
        got = T.batch_norm(T.Tensor(x), T.Tensor(g), T.Tensor(be), True).data
        errs["batch_norm_oracle"] = max(errs["batch_norm_oracle"], float(np.abs(got - naive_batch_norm(x, g, be)).max()))
    dt = time.perf_counter() - t0
    # oracle checks compare absolute differences
    return [CheckResult(name, instances, e, e <= 1e-10, dt / 3, e) for name, e in errs.items()]


def naive_kl(mu, sigma):
    """1/2 * sum(mu^2 + sigma^2 - 2 log sigma - 1), per row."""
    return 0.5 * np.sum(mu ** 2 + sigma ** 2 - 2 * np.log(sigma) - 1, axis=1)


def check_kl(seed=0, n=1000):
    rng = derive_rng(seed, 400)
    t0 = time.perf_counter()
    params = CaParams(5, 4, rng, np.float64)
    phi = rng.normal(size=(n, 5))
    _, dist = ca_forward(phi, params, rng.normal(size=(n, 4)))
    mu, sigma = dist.mu.data, np.exp(dist.log_sigma.data)
    err = float(np.abs(kl_per_sample(dist).data - naive_kl(mu, sigma)).max())
    return [CheckResult("kl_closed_form", n, err, err <= 1e-12, time.perf_counter() - t0, err)]


def run_all(seed=0, instances=INSTANCES):
    return (check_ops(seed, instances) + check_losses(seed, instances)
            + check_oracles(seed, instances) + check_kl(seed))
