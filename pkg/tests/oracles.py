"""Independent reference computations used as test oracles.

Everything here is written with explicit loops / closed forms and shares no
code with the package under test.
"""

import math

import numpy as np
import torch
from torch.func import functional_call


def conv2d_loop(x, w, b, stride=1, pad=0):
    """Direct cross-correlation, zero padding. x (C,H,W), w (O,C,k,k)."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[oc, i, j] = (patch * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


def conv_transpose2d_loop(x, w, b, stride=2, pad=1, output_padding=1):
    """Scatter-add definition of transposed convolution. x (C,H,W), w (C,O,k,k)."""
    c, h, wd = x.shape
    _, o, k, _ = w.shape
    full_h = (h - 1) * stride + k
    full_w = (wd - 1) * stride + k
    full = np.zeros((o, full_h + output_padding, full_w + output_padding))
    for ic in range(c):
        for i in range(h):
            for j in range(wd):
                full[:, i * stride:i * stride + k, j * stride:j * stride + k] += x[ic, i, j] * w[ic]
    oh = (h - 1) * stride - 2 * pad + k + output_padding
    ow = (wd - 1) * stride - 2 * pad + k + output_padding
    out = full[:, pad:pad + oh, pad:pad + ow]
    return out + (b[:, None, None] if b is not None else 0.0)


def attention_closed_form(q, k, v):
    """softmax(q k^T / sqrt(d)) v for a single head, rows computed one by one."""
    d = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(k.shape[0])]
        m = max(logits)
        e = [math.exp(t - m) for t in logits]
        s = sum(e)
        for j in range(k.shape[0]):
            out[i] += e[j] / s * v[j]
    return out


def finite_difference_check(module, inputs, n_probe=None, eps=1e-4, rtol=1e-3, atol=1e-6, seed=0):
    """Compare autograd gradients of sum(R * module(*inputs)) with central differences.

    Checks every parameter entry and every entry of floating-point inputs, in
    float64. ``n_probe`` limits each tensor to a random subset of coordinates.
    Coordinates where the central difference at ``eps`` and ``eps / 10``
    disagree straddle a ReLU kink; those are re-checked with a 100x smaller
    step, and at most 5% of coordinates may need that.
    """
    module = module.double()
    inputs = [t.double().clone().requires_grad_(True) if t.is_floating_point() else t for t in inputs]
    params = {k: p.detach().clone().requires_grad_(True) for k, p in module.named_parameters()}
    gen = torch.Generator().manual_seed(seed)

    def f(pdict, ins):
        return functional_call(module, pdict, tuple(ins))

    out = f(params, inputs)
    weight = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(pdict, ins):
        with torch.no_grad():
            return float((f(pdict, ins) * weight).sum())

    loss = (out * weight).sum()
    targets = list(params.items()) + [(f"input{i}", t) for i, t in enumerate(inputs) if t.requires_grad]
    grads = torch.autograd.grad(loss, [t for _, t in targets], allow_unused=True)
    worst = 0.0
    kinks = checked = 0
    for (name, t), g in zip(targets, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.detach().reshape(-1)
        coords = range(flat.numel())
        if n_probe is not None and flat.numel() > n_probe:
            coords = torch.randperm(flat.numel(), generator=gen)[:n_probe].tolist()
        for c in coords:
            analytic = g.reshape(-1)[c].item()

            def probe(step):
                vals = []
                for delta in (step, -step):
                    pert = flat.clone()
                    pert[c] = flat[c] + delta
                    new = pert.reshape(t.shape)
                    if name.startswith("input"):
                        ins = list(inputs)
                        ins[int(name[5:])] = new
                        vals.append(scalar(params, ins))
                    else:
                        vals.append(scalar({**params, name: new}, inputs))
                return (vals[0] - vals[1]) / (2 * step)

            numeric = probe(eps)
            finer = probe(eps / 10)
            if abs(numeric - finer) > rtol * abs(finer) + atol:
                # smooth functions give O(step^2)-close estimates at both steps;
                # disagreement means the step straddles a ReLU kink
                kinks += 1
                numeric = probe(eps / 100)
            err = abs(analytic - numeric)
            assert err <= atol + rtol * abs(numeric), (
                f"{name}[{c}]: analytic {analytic:.8g} vs numeric {numeric:.8g}")
            worst = max(worst, err / (atol + rtol * abs(numeric)))
            checked += 1
    assert kinks <= max(2, 0.05 * checked), f"{kinks} of {checked} coordinates hit activation kinks"
    finite_difference_check.last_kinks = (kinks, checked)
    return worst
