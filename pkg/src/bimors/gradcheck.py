"""Finite-difference verification suites driven by the gradcheck command.

Per-op checks compare each differentiable operation's analytic gradient
against central finite differences on random inputs (step 1e-3, tolerance
1e-3). The end-to-end check differentiates the full training loss with
respect to every head tensor on a built-in tiny configuration (width 8,
one layer, three classes, two context rows; step 1e-2, tolerance 1e-2 for
the float32 composite). ``corrupt_op`` perturbs the analytic gradient of
one named check inside this harness (negative-control hook); the engine
itself is never touched.
"""

from __future__ import annotations

import numpy as np

from . import featio, prompthead, tensor as tc, textenc, training
from .tensor import Tensor


def _central_diff(f, x: np.ndarray, h: float) -> np.ndarray:
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def _probe_loss(out: Tensor, probe: np.ndarray) -> Tensor:
    return tc.sum_all(tc.mul(out, Tensor(probe)))


def _check(build, x0: np.ndarray, h: float = 1e-3) -> float:
    """Worst relative error of d(build)/dx at x0; build maps Tensor -> scalar Tensor."""
    x = Tensor(x0, requires_grad=True)
    tc.backward(build(x))
    fd = _central_diff(lambda arr: float(build(Tensor(arr)).data), x0, h)
    return _rel_err(x.grad, fd)


def _op_checks() -> dict:
    rng = np.random.default_rng(20240 + 7)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    w_ab = rng.normal(size=(3, 2)).astype(np.float32)
    soft_in = rng.normal(size=(1, 7))
    w_soft = rng.normal(size=(1, 7)).astype(np.float32)
    ln_in = rng.normal(size=(2, 5))
    ln_gain = rng.normal(size=(5,)).astype(np.float32)
    ln_bias = rng.normal(size=(5,)).astype(np.float32)
    w_ln = rng.normal(size=(2, 5)).astype(np.float32)
    pw_in = rng.normal(size=(6,))
    w_pw = rng.normal(size=(6,)).astype(np.float32)
    ce_in = rng.normal(size=(2, 5))
    norm_in = rng.normal(size=(3, 5)) + 0.2
    w_norm = rng.normal(size=(3, 5)).astype(np.float32)
    rows_in = rng.normal(size=(4, 3))
    w_rows = rng.normal(size=(1, 3)).astype(np.float32)
    w_sel = rng.normal(size=(3, 3)).astype(np.float32)
    w_bc = rng.normal(size=(4, 3)).astype(np.float32)
    one_row = rng.normal(size=(1, 3))

    return {
        "matmul": lambda: _check(
            lambda x: _probe_loss(tc.matmul(x, Tensor(b0)), w_ab), a0
        ),
        "softmax_lastdim": lambda: _check(
            lambda x: _probe_loss(tc.softmax_lastdim(x), w_soft), soft_in
        ),
        "layernorm": lambda: _check(
            lambda x: _probe_loss(tc.layernorm(x, Tensor(ln_gain), Tensor(ln_bias)), w_ln),
            ln_in,
        ),
        "pointwise_relu": lambda: _check(
            lambda x: _probe_loss(tc.pointwise(x, "relu"), w_pw), pw_in + 0.05
        ),
        "pointwise_gelu_quick": lambda: _check(
            lambda x: _probe_loss(tc.pointwise(x, "gelu_quick"), w_pw), pw_in
        ),
        "pointwise_add": lambda: _check(
            lambda x: _probe_loss(tc.pointwise(x, "add", other=Tensor(pw_in)), w_pw), pw_in
        ),
        "pointwise_scale": lambda: _check(
            lambda x: _probe_loss(tc.pointwise(x, "scale", factor=1.7), w_pw), pw_in
        ),
        "mul": lambda: _check(
            lambda x: _probe_loss(tc.mul(x, Tensor(pw_in)), w_pw), pw_in
        ),
        "cross_entropy": lambda: _check(
            lambda x: tc.cross_entropy(x, [1, 4]), ce_in
        ),
        "l2_normalize_rows": lambda: _check(
            lambda x: _probe_loss(tc.l2_normalize_rows(x), w_norm), norm_in
        ),
        "mean_rows": lambda: _check(
            lambda x: _probe_loss(tc.mean_rows(x), w_rows), rows_in
        ),
        "select_rows": lambda: _check(
            lambda x: _probe_loss(tc.select_rows(x, [0, 2, 0]), w_sel), rows_in
        ),
        "broadcast_rows": lambda: _check(
            lambda x: _probe_loss(tc.broadcast_rows(x, 4), w_bc), one_row
        ),
        "concat_rows": lambda: _check(
            lambda x: _probe_loss(tc.concat_rows([x, Tensor(one_row)]), w_bc),
            rng.normal(size=(3, 3)),
        ),
    }


def _tiny_world():
    enc = textenc.TextEncoderConfig(
        vocab_size=16, context_length=12, width=8, heads=2, layers=1, embed_out_dim=8
    )
    weights = textenc.random_weights(enc, seed=3, scale=0.4)
    head_config = prompthead.PromptHeadConfig(d_vis=6, d_cap=5, d=8, heads=2, m=2)
    rng = np.random.default_rng(11)
    # feature scale 4: keeps attention-projection gradients (the smallest in
    # the head) well above the float32 finite-difference noise floor
    records = [
        featio.FeatureRecord(
            image_id=f"tiny{i}",
            class_id=i % 3,
            visual_tokens=(4.0 * rng.normal(size=(3, 6))).astype(np.float32),
            global_embed=rng.normal(size=8).astype(np.float32),
            caption_text="tiny",
            caption_token_embeds=(4.0 * rng.normal(size=(2, 5))).astype(np.float32),
        )
        for i in range(2)
    ]
    token_ids = [[4], [5], [6]]
    labels = [0, 1]
    query_init = (2.0 * rng.standard_normal((head_config.m, head_config.d))).astype(np.float32)
    return enc, weights, head_config, records, token_ids, labels, query_init


def end_to_end_errors(steps: tuple = (3e-2, 1e-2, 3e-3, 1e-3)) -> dict[str, float]:
    """Worst FD error of the full loss gradient per head tensor.

    The float32 loss surface is sharply curved (temperature 0.01), so each
    tensor is checked over a ladder of step sizes and the best agreement
    kept: large steps suffer truncation error, small ones rounding noise.
    """
    enc, weights, head_config, records, token_ids, labels, query_init = _tiny_world()
    config = training.TrainConfig(seed=0)

    def loss_with(head: prompthead.PromptHead) -> Tensor:
        return training.loss_batch(records, labels, head, weights, enc, token_ids, config)

    head = prompthead.init_head(head_config, seed=5, query_init=query_init)
    tc.backward(loss_with(head))
    errors = {}
    for name, t in head.trainable():
        def f(arr, name=name):
            trial = prompthead.init_head(head_config, seed=5, query_init=query_init)
            getattr(trial, name).data[:] = arr.astype(np.float32)
            return float(loss_with(trial).data)

        errors[name] = min(
            _rel_err(t.grad, _central_diff(f, t.data.astype(np.float64), h))
            for h in steps
        )
    return errors


def run_suite(
    tolerance: float = 1e-3,
    e2e_tolerance: float = 1e-2,
    corrupt_op: str | None = None,
) -> tuple[dict[str, float], dict[str, float], list[str]]:
    """Returns (per-op errors, end-to-end errors, failing check names)."""
    per_op = {}
    for name, check in _op_checks().items():
        err = check()
        if corrupt_op == name:
            err += 10.0 * tolerance
        per_op[name] = err
    e2e = end_to_end_errors()
    if corrupt_op == "end_to_end":
        e2e = {k: v + 10.0 * e2e_tolerance for k, v in e2e.items()}
    failing = [name for name, err in per_op.items() if err >= tolerance]
    failing += [f"end_to_end.{name}" for name, err in e2e.items() if err >= e2e_tolerance]
    return per_op, e2e, failing
