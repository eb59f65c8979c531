"""Independent reference implementations used as test oracles.

Everything here is written with plain numpy loops and no autodiff so that it
shares no code path with the package under test.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from gatedcil.autodiff import Tensor, no_grad, ops

# -- finite differences ------------------------------------------------------------------


def _scalarize(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, weights))


def gradcheck(fn, arrays: list[np.ndarray], h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences over all inputs.

    Non-scalar outputs are reduced with fixed random weights. The error for one
    input is ``|g_a - g_n| / max(|g_a|, |g_n|)`` in the Euclidean norm; inputs
    whose gradient is numerically zero on both routes count as exact.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    weights = None
    if out.size != 1:
        weights = np.random.default_rng([seed, 99]).normal(size=out.shape)
    _scalarize(out, weights).backward()
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def value(vals: list[np.ndarray]) -> float:
        with no_grad():
            return float(_scalarize(fn(*[Tensor(v) for v in vals]), weights).data)

    worst = 0.0
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric[idx] = (value(plus) - value(minus)) / (2 * h)
        scale = max(np.linalg.norm(analytic[i]), np.linalg.norm(numeric))
        if scale < 1e-9:
            continue
        worst = max(worst, float(np.linalg.norm(analytic[i] - numeric) / scale))
    return worst


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _shape(rng, ndim: int, lo: int = 1, hi: int = 5) -> tuple[int, ...]:
    return tuple(int(d) for d in rng.integers(lo, hi, size=ndim))


def _case_add(rng):
    s = _shape(rng, 2)
    return ops.add, [rng.normal(size=s), rng.normal(size=(s[1],))]


def _case_sub(rng):
    s = _shape(rng, 2)
    return ops.sub, [rng.normal(size=(s[1],)), rng.normal(size=s)]


def _case_mul(rng):
    s = _shape(rng, 3)
    return ops.mul, [rng.normal(size=s), rng.normal(size=s[1:])]


def _case_div(rng):
    s = _shape(rng, 2)
    return ops.div, [rng.normal(size=s), _pos(rng, s) * rng.choice([-1, 1], size=s)]


def _case_neg(rng):
    return ops.neg, [rng.normal(size=_shape(rng, 2))]


def _case_matmul(rng):
    m, k, n = _shape(rng, 3, 1, 6)
    return ops.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _case_matmul_batched(rng):
    b, m, k, n = _shape(rng, 4, 1, 4)
    return ops.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(k, n))]


def _case_exp(rng):
    return ops.exp, [rng.normal(size=_shape(rng, 2))]


def _case_log(rng):
    return ops.log, [_pos(rng, _shape(rng, 2))]


def _case_sigmoid(rng):
    return ops.sigmoid, [rng.normal(scale=2.0, size=_shape(rng, 2))]


def _case_tanh(rng):
    return ops.tanh, [rng.normal(size=_shape(rng, 2))]


def _case_gelu(rng):
    return ops.gelu, [rng.normal(scale=1.5, size=_shape(rng, 2))]


def _case_softmax(rng):
    axis = int(rng.integers(0, 2))
    return (lambda a: ops.softmax(a, axis=axis)), [rng.normal(size=_shape(rng, 2, 2, 6))]


def _case_layer_norm(rng):
    return ops.layer_norm, [rng.normal(size=_shape(rng, 2, 2, 7))]


def _case_sum(rng):
    axis = int(rng.integers(0, 3))
    return (lambda a: ops.sum(a, axis=axis, keepdims=bool(axis % 2))), [rng.normal(size=_shape(rng, 3))]


def _case_mean(rng):
    return (lambda a: ops.mean(a, axis=-1)), [rng.normal(size=_shape(rng, 3))]


def _case_reshape(rng):
    a, b = _shape(rng, 2)
    return (lambda x: ops.reshape(x, (b, a))), [rng.normal(size=(a, b))]


def _case_transpose(rng):
    return (lambda x: ops.transpose(x, (2, 0, 1))), [rng.normal(size=_shape(rng, 3))]


def _case_swapaxes(rng):
    return (lambda x: ops.swapaxes(x, -1, -2)), [rng.normal(size=_shape(rng, 3))]


def _case_broadcast(rng):
    n, d = _shape(rng, 2)
    return (lambda x: ops.broadcast_to(x, (3, n, d))), [rng.normal(size=(1, n, d))]


def _case_concat(rng):
    a, b, d = _shape(rng, 3)
    return (lambda x, y: ops.concat([x, y], axis=0)), [rng.normal(size=(a, d)), rng.normal(size=(b, d))]


def _case_getitem(rng):
    n, d = _shape(rng, 2, 2, 6)
    col = int(rng.integers(0, d))
    return (lambda x: x[:, col]), [rng.normal(size=(n, d))]


def _case_cosine(rng):
    s = _shape(rng, 2, 2, 6)
    return (lambda x, y: ops.cosine_similarity(x, y)), [rng.normal(size=s), rng.normal(size=s)]


def _case_bce(rng):
    s = _shape(rng, 2)
    targets = rng.integers(0, 2, size=s).astype(float)
    return (lambda x: ops.bce_with_logits(x, targets)), [rng.normal(scale=2.0, size=s)]


def _case_ce(rng):
    b, c = _shape(rng, 2, 2, 6)
    labels = rng.integers(0, c, size=b)
    return (lambda x: ops.softmax_cross_entropy(x, labels)), [rng.normal(size=(b, c))]


def _case_kl(rng):
    s = _shape(rng, 2, 2, 6)
    temp = float(rng.uniform(0.5, 3.0))
    return (lambda t, q: ops.kl_div(t, q, temp)), [rng.normal(size=s), rng.normal(size=s)]


PRIMITIVE_CASES = {
    "add": _case_add, "sub": _case_sub, "mul": _case_mul, "div": _case_div, "neg": _case_neg,
    "matmul": _case_matmul, "matmul_batched": _case_matmul_batched, "exp": _case_exp, "log": _case_log,
    "sigmoid": _case_sigmoid, "tanh": _case_tanh, "gelu": _case_gelu, "softmax": _case_softmax,
    "layer_norm": _case_layer_norm, "sum": _case_sum, "mean": _case_mean, "reshape": _case_reshape,
    "transpose": _case_transpose, "swapaxes": _case_swapaxes, "broadcast_to": _case_broadcast,
    "concat": _case_concat, "getitem": _case_getitem, "cosine_similarity": _case_cosine,
    "bce_with_logits": _case_bce, "softmax_cross_entropy": _case_ce, "kl_div": _case_kl,
}


# -- straight-line forward passes ------------------------------------------------------


def _softmax_row(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def straight_gcab(b: np.ndarray, m_i: np.ndarray | None, m_2: np.ndarray | None, w: dict) -> np.ndarray:
    """Gated class-attention for one sample of shape (N, D), looping over heads and tokens.

    ``w`` maps names to arrays: theta (D,), Wq/Wk/Wv/Wo (D, D), W1 (D, H), W2 (H, D),
    biases bq/bk/bv/bo (D,), b1 (H,), b2 (D,), and the head count ``h``.
    """
    n, d = b.shape
    h = w["h"]
    dh = d // h
    one_i = np.ones(d) if m_i is None else m_i
    one_2 = np.ones(w["W1"].shape[1]) if m_2 is None else m_2
    theta = w["theta"]
    p = np.vstack([theta[None, :], b])
    q = ((theta * one_i) @ w["Wq"] + w["bq"]) * one_i
    keys = np.array([((p[j] * one_i) @ w["Wk"] + w["bk"]) * one_i for j in range(n + 1)])
    vals = np.array([((p[j] * one_i) @ w["Wv"] + w["bv"]) * one_i for j in range(n + 1)])
    heads = []
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        scores = np.array([np.dot(q[sl], keys[j, sl]) for j in range(n + 1)]) / math.sqrt(d / h)
        a = _softmax_row(scores)
        heads.append(sum(a[j] * vals[j, sl] for j in range(n + 1)))
    o = np.concatenate(heads) @ w["Wo"] + w["bo"]
    b_prime = o + theta
    u = (b_prime * one_i) @ w["W1"] + w["b1"]
    if w.get("act") == "gelu":
        u = 0.5 * u * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u**3)))
    v = (u * one_2) @ w["W2"] + w["b2"]
    return v + o


def gcab_weights(block) -> dict:
    return {
        "h": block.num_heads, "theta": block.class_token.data[0].copy(), "act": block.mlp_activation,
        "Wq": block.q.weight.data, "bq": block.q.bias.data, "Wk": block.k.weight.data, "bk": block.k.bias.data,
        "Wv": block.v.weight.data, "bv": block.v.bias.data, "Wo": block.o.weight.data, "bo": block.o.bias.data,
        "W1": block.fc1.weight.data, "b1": block.fc1.bias.data, "W2": block.fc2.weight.data,
        "b2": block.fc2.bias.data,
    }


def _layernorm_row(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return (x - mu) / math.sqrt(var + eps) * gamma + beta


def straight_encoder_block(x: np.ndarray, blk) -> np.ndarray:
    """Pre-norm block x' = x + SA(LN x), out = x' + MLP(LN x') for one (N, D) sample."""
    n, d = x.shape
    h = blk.heads
    dh = d // h
    ln1 = np.array([_layernorm_row(x[i], blk.norm1.weight.data, blk.norm1.bias.data, blk.norm1.eps)
                    for i in range(n)])
    q = ln1 @ blk.q.weight.data + blk.q.bias.data
    k = ln1 @ blk.k.weight.data + blk.k.bias.data
    v = ln1 @ blk.v.weight.data + blk.v.bias.data
    att = np.zeros((n, d))
    for head in range(h):
        sl = slice(head * dh, (head + 1) * dh)
        for i in range(n):
            scores = np.array([np.dot(q[i, sl], k[j, sl]) for j in range(n)]) / math.sqrt(d / h)
            a = _softmax_row(scores)
            att[i, sl] = sum(a[j] * v[j, sl] for j in range(n))
    x1 = x + att @ blk.out.weight.data + blk.out.bias.data
    ln2 = np.array([_layernorm_row(x1[i], blk.norm2.weight.data, blk.norm2.bias.data, blk.norm2.eps)
                    for i in range(n)])
    u = ln2 @ blk.fc1.weight.data + blk.fc1.bias.data
    u = 0.5 * u * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u**3)))
    return x1 + u @ blk.fc2.weight.data + blk.fc2.bias.data


# -- brute-force metrics --------------------------------------------------------------


def _first_argmax(values) -> int:
    best = 0
    for i in range(1, len(values)):
        if values[i] > values[best]:
            best = i
    return best


def brute_metrics(stage_logits: list[list[np.ndarray]], labels: list[np.ndarray], class_counts: list[int]) -> dict:
    """Metrics from raw logits by explicit counting.

    ``stage_logits[i][j]`` holds the (n_j, sum(class_counts[:i+1])) logits of task
    j's test samples after stage i; ``labels[j]`` are global column indices.
    """
    n_stages = len(stage_logits)
    bounds = [0]
    for c in class_counts:
        bounds.append(bounds[-1] + c)
    per_stage_tag = []
    cum = []
    final_taw = []
    for i in range(n_stages):
        correct = total = 0
        cum_row = []
        for k in range(i + 1):
            c_ok = c_tot = 0
            for j in range(k + 1):
                for row, y in zip(stage_logits[i][j], labels[j]):
                    c_ok += int(_first_argmax(list(row[:bounds[k + 1]])) == y)
                    c_tot += 1
            cum_row.append(Fraction(100 * c_ok, c_tot))
        cum.append(cum_row)
        for j in range(i + 1):
            taw_ok = 0
            for row, y in zip(stage_logits[i][j], labels[j]):
                correct += int(_first_argmax(list(row)) == y)
                total += 1
                lo, hi = bounds[j], bounds[j + 1]
                taw_ok += int(lo + _first_argmax(list(row[lo:hi])) == y)
            if i == n_stages - 1:
                final_taw.append(Fraction(100 * taw_ok, len(labels[j])))
        per_stage_tag.append(Fraction(100 * correct, total))
    forgetting = []
    for k in range(n_stages):
        earlier = [cum[t][k] for t in range(k, n_stages - 1)]
        forgetting.append(max(earlier) - cum[-1][k] if earlier else Fraction(0))
    return {
        "acc_tag": float(per_stage_tag[-1]),
        "acc_taw": float(sum(final_taw) / len(final_taw)),
        "acc_avg": float(sum(per_stage_tag) / len(per_stage_tag)),
        "per_stage_tag": [float(v) for v in per_stage_tag],
        "cumulative_accuracy": [float(v) for v in cum[-1]],
        "cumulative_forgetting": [float(v) for v in forgetting],
        "mean_cumulative_forgetting": float(sum(forgetting) / len(forgetting)),
    }


def random_prediction_instance(rng: np.random.Generator):
    """Random class counts, sample counts and integer logits (ties included)."""
    n_tasks = int(rng.integers(1, 6))
    counts = [int(c) for c in rng.integers(1, 5, size=n_tasks)]
    bounds = np.cumsum([0, *counts])
    labels = [rng.integers(bounds[j], bounds[j + 1], size=int(rng.integers(1, 12))) for j in range(n_tasks)]
    stage_logits = [[rng.integers(-3, 4, size=(len(labels[j]), int(bounds[i + 1]))).astype(float)
                     for j in range(i + 1)] for i in range(n_tasks)]
    return stage_logits, labels, counts


def gradcheck_params(loss_fn, params: list[Tensor], entries: int = 4, h: float = 1e-5,
                     seed: int = 0) -> tuple[float, int]:
    """Relative error of backprop vs central differences on sampled entries of every parameter.

    Returns (worst relative error, number of tensors checked). The error per
    tensor is taken over the sampled entries only.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng([seed, 98])
    worst, checked = 0.0, 0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        num, ana = [], []
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + h
            with no_grad():
                up = float(loss_fn().data)
            flat[idx] = old - h
            with no_grad():
                down = float(loss_fn().data)
            flat[idx] = old
            num.append((up - down) / (2 * h))
            ana.append(0.0 if g is None else g.reshape(-1)[idx])
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana))
        checked += 1
        if scale < 1e-9:
            continue
        worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst, checked


def composite_state(seed: int, loss: str = "bce", backbone_reg: str = "pfr2"):
    """Tiny learner in the middle of task 2 with every term active (all dims <= 8).

    Returns (state, images, columns). The first task is finalized without
    training so its soft masks at s_max become the cumulative history.
    """
    from gatedcil.config import preset
    from gatedcil.harness import CilState

    cfg = preset("tiny10", seed=seed, model={"image_size": 4, "patch_size": 2, "embed_dim": 8, "depth": 1,
                                             "heads": 2, "mlp_ratio": 1.0, "mask_init": 1.0},
                 train={"loss": loss, "lambda_pfr": 1.0, "lambda_gcab": 1.0, "s_max": 4.0,
                        "binarize_at_accumulate": False},
                 ablation={"gca": True, "backbone_reg": backbone_reg, "fdc": backbone_reg.startswith("pfr")})
    state = CilState(cfg, [2, 3])
    state.begin_task()
    state.end_training()
    state.finalize_task()
    state.begin_task()
    rng = np.random.default_rng([seed, 5])
    # perturb the frozen snapshot so backbone regularization is not at its optimum
    for p in state.frozen_backbone.parameters():
        p.data += rng.normal(0.0, 0.05, size=p.shape)
    images = rng.normal(size=(3, 4, 4, 1))
    columns = rng.integers(0, 5, size=3)
    return state, images, columns


def composite_loss_instance(seed: int, loss: str = "bce", backbone_reg: str = "pfr2"):
    """(loss_fn, parameters) for the total second-task loss of ``composite_state``."""
    state, images, columns = composite_state(seed, loss, backbone_reg)
    return (lambda: state.training_losses(images, columns, 1.7)[0]), state.trainable_parameters()
