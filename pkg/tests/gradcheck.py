"""Central finite-difference gradient checking against the autodiff tape.

The ops under test run in float32. At step h the FD quotient carries
irreducible noise of about eps32 * |f| / h per element (~1.2e-4 for unit-scale
outputs at h=1e-3), so the relative error uses a resolution floor in its
denominator: gradients far below the floor are unresolvable by this oracle,
while any structurally wrong vjp still shows errors orders of magnitude
above the tolerance.
"""

import numpy as np

from ipcs import tensor as T
from ipcs.tensor import ComputationTape, Tensor, backward

FD_STEP = 1e-3
FD_RTOL = 1e-3


def numeric_grad(f, arrays, which, h=FD_STEP):
    flat = arrays[which].reshape(-1)
    g = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arrays)
        flat[i] = orig - h
        fm = f(arrays)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(arrays[which].shape)


def check_gradients(make_case, n_cases=20, seed_base=1000):
    """make_case(rng) -> (arrays, op_fn, weights | None).

    op_fn maps tensors to the op output; the harness reduces it to a scalar
    with the fixed weights. The analytic path runs fully in float32; the FD
    oracle reduces in float64 to keep its own quotient clean.
    """
    for case in range(n_cases):
        rng = np.random.default_rng(seed_base + case)
        arrays, op_fn, weights = make_case(rng)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with ComputationTape() as tape:
            out = op_fn(tensors)
            loss = out if weights is None else T.sum_all(T.mul(out, Tensor(weights)))
            backward(loss, tape)

        def eval_loss(arrs):
            with T.no_tape():
                o = op_fn([Tensor(a) for a in arrs]).data.astype(np.float64)
            return float(o) if weights is None else float((o * weights).sum())

        for which, t in enumerate(tensors):
            analytic = np.asarray(t.grad, dtype=np.float64)
            numeric = numeric_grad(eval_loss, [a.copy() for a in arrays], which)
            floor = 0.25 * np.sqrt(analytic.size)  # float32 FD resolution
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
            err = np.linalg.norm(analytic - numeric) / denom
            assert err < FD_RTOL, (
                f"case {case} input {which}: relative error {err:.2e}")


# ---------------------------------------------------------------------------
# randomized case builders, one per differentiable operation


def _w(rng, shape):
    return rng.normal(size=shape).astype(np.float32)


def _case_matmul(rng):
    r, k, c = rng.integers(1, 6, size=3)
    a = rng.normal(size=(r, k)).astype(np.float32)
    b = rng.normal(size=(k, c)).astype(np.float32)
    return [a, b], lambda ts: T.matmul(ts[0], ts[1]), _w(rng, (r, c))


def _case_add(rng):
    n, c = rng.integers(1, 6, size=2)
    x = rng.normal(size=(n, c)).astype(np.float32)
    b = rng.normal(size=(c,)).astype(np.float32)
    return [x, b], lambda ts: T.add(ts[0], ts[1]), _w(rng, (n, c))


def _case_mul(rng):
    n, c = rng.integers(1, 6, size=2)
    a = rng.normal(size=(n, c)).astype(np.float32)
    b = rng.normal(size=(n, c)).astype(np.float32)
    return [a, b], lambda ts: T.mul(ts[0], ts[1]), _w(rng, (n, c))


def _case_scale(rng):
    x = rng.normal(size=(4, 3)).astype(np.float32)
    alpha = float(rng.normal())
    return [x], lambda ts: T.scale(ts[0], alpha), _w(rng, (4, 3))


def _case_relu(rng):
    x = rng.normal(size=(5, 4)).astype(np.float32)
    x += np.where(x >= 0, 0.1, -0.1)  # keep clear of the kink
    return [x], lambda ts: T.relu(ts[0]), _w(rng, (5, 4))


def _case_concat(rng):
    n = int(rng.integers(1, 5))
    a = rng.normal(size=(n, int(rng.integers(1, 4)))).astype(np.float32)
    b = rng.normal(size=(n, int(rng.integers(1, 4)))).astype(np.float32)
    return ([a, b], lambda ts: T.concat_cols(ts[0], ts[1]),
            _w(rng, (n, a.shape[1] + b.shape[1])))


def _case_sparse_row_mix(rng):
    import scipy.sparse as sp
    n, c, k = int(rng.integers(3, 7)), int(rng.integers(1, 4)), 2
    x = rng.normal(size=(n, c)).astype(np.float32)
    cols = np.stack([rng.permutation(n)[:k] for _ in range(n)])
    rows = np.repeat(np.arange(n), k)
    mat = sp.csr_matrix((np.full(n * k, 1.0 / k, dtype=np.float32),
                         (rows, cols.ravel())), shape=(n, n))
    mat_t = mat.T.tocsr()
    return [x], lambda ts: T.sparse_row_mix(mat, mat_t, ts[0]), _w(rng, (n, c))


def _case_batch_norm_running(rng):
    n, c = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, c)).astype(np.float32)
    gamma = (1 + 0.3 * rng.normal(size=c)).astype(np.float32)
    beta = rng.normal(size=c).astype(np.float32)
    mu = rng.normal(size=c).astype(np.float32)
    var = (0.5 + rng.random(c)).astype(np.float32)

    def op(ts):
        st = T.BatchNormState(c, epsilon=1e-5)
        st.gamma, st.beta = ts[1], ts[2]
        st.running_mu, st.running_sigma2 = mu, var
        return T.batch_norm(ts[0], st, mode=T.BNMode.RUNNING)
    return [x, gamma, beta], op, _w(rng, (n, c))


def _case_batch_norm_instance(rng):
    n, c = int(rng.integers(3, 7)), int(rng.integers(1, 4))
    x = rng.normal(size=(n, c)).astype(np.float32)
    gamma = (1 + 0.3 * rng.normal(size=c)).astype(np.float32)
    beta = rng.normal(size=c).astype(np.float32)

    def op(ts):
        st = T.BatchNormState(c, epsilon=1e-5)
        st.gamma, st.beta = ts[1], ts[2]
        return T.batch_norm(ts[0], st, mode=T.BNMode.INSTANCE)
    return [x, gamma, beta], op, _w(rng, (n, c))


def _case_softmax(rng):
    n, m = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    z = rng.normal(size=(n, m)).astype(np.float32)
    return [z], lambda ts: T.softmax(ts[0]), _w(rng, (n, m))


def _case_row_entropy(rng):
    n, m = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    z = rng.normal(size=(n, m)).astype(np.float32)
    return [z], lambda ts: T.row_entropy(T.softmax(ts[0])), _w(rng, (n,))


def _case_masked_wce(rng):
    n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    z = rng.normal(size=(n, m)).astype(np.float32)
    labels = rng.integers(0, m, size=n)
    targets = np.zeros((n, m), dtype=np.float32)
    targets[np.arange(n), labels] = 1.0
    mask = (rng.random(n) < 0.7).astype(np.float32)
    mask[0] = 1.0
    tt, tm = Tensor(targets), Tensor(mask)
    return ([z], lambda ts: T.masked_weighted_cross_entropy(
        T.softmax(ts[0]), tt, tm), None)


def _case_sum_all(rng):
    x = rng.normal(size=(3, 4)).astype(np.float32)
    return [x], lambda ts: T.sum_all(ts[0]), None


OP_CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "relu": _case_relu,
    "concat_cols": _case_concat,
    "sparse_row_mix": _case_sparse_row_mix,
    "batch_norm_running": _case_batch_norm_running,
    "batch_norm_instance": _case_batch_norm_instance,
    "softmax": _case_softmax,
    "row_entropy": _case_row_entropy,
    "masked_wce": _case_masked_wce,
    "sum_all": _case_sum_all,
}
