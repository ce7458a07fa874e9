"""Independent numerical oracles used across the test-suite."""

import numpy as np

from timeflow import autodiff as ad
from timeflow.model import TimeFlowModel


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x.copy())
        flat[i] = old - h
        fm = f(x.copy())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def np_embed(t, n_freq):
    t = np.asarray(t, dtype=np.float64)
    out = []
    for i in range(n_freq):
        out.append(np.sin(np.pi * 2.0**i * t))
        out.append(np.cos(np.pi * 2.0**i * t))
    return np.stack(out, axis=-1)


def np_forward(params, depth, n_freq, z, t):
    """Plain numpy forward of the modulated network, written independently
    of the package. ``params`` uses the package's named-parameter layout."""
    h = np_embed(t, n_freq)
    for l in range(depth):
        h = np.maximum(h @ params[f"inr.weight.{l}"] + params[f"inr.bias.{l}"] + z @ params[f"hyper.weight.{l}"], 0.0)
    return (h @ params[f"inr.weight.{depth}"] + params[f"inr.bias.{depth}"])[:, 0]


def np_loss_and_zgrad(params, depth, n_freq, z, t, y):
    """MSE of one sample and its gradient w.r.t. the code, by manual backprop."""
    hs, pres = [np_embed(t, n_freq)], []
    for l in range(depth):
        pre = hs[-1] @ params[f"inr.weight.{l}"] + params[f"inr.bias.{l}"] + z @ params[f"hyper.weight.{l}"]
        pres.append(pre)
        hs.append(np.maximum(pre, 0.0))
    out = (hs[-1] @ params[f"inr.weight.{depth}"] + params[f"inr.bias.{depth}"])[:, 0]
    r = out - y
    loss = float(np.mean(r * r))
    dout = 2.0 * r / len(y)
    dh = np.outer(dout, params[f"inr.weight.{depth}"][:, 0])
    gz = np.zeros_like(z)
    for l in reversed(range(depth)):
        dpre = dh * (pres[l] > 0)
        gz += dpre.sum(axis=0) @ params[f"hyper.weight.{l}"].T
        dh = dpre @ params[f"inr.weight.{l}"].T
    return loss, gz


def np_adapt(params, depth, n_freq, latent_dim, t, y, alpha, steps):
    z = np.zeros(latent_dim)
    for _ in range(steps):
        _, g = np_loss_and_zgrad(params, depth, n_freq, z, t, y)
        z = z - alpha * g
    return z


def np_outer_objective(params, depth, n_freq, latent_dim, windows, alpha, steps):
    """Adapt-then-evaluate objective: mean over windows of L_in + lambda L_out.

    ``windows`` is a list of (t_in, y_in, t_out, y_out) with t_out None for
    pure reconstruction windows.
    """
    total = 0.0
    for t_in, y_in, t_out, y_out in windows:
        z = np_adapt(params, depth, n_freq, latent_dim, t_in, y_in, alpha, steps)
        total += np.mean((np_forward(params, depth, n_freq, z, t_in) - y_in) ** 2)
        if t_out is not None:
            total += np.mean((np_forward(params, depth, n_freq, z, t_out) - y_out) ** 2)
    return total / len(windows)


def reconstruction_grad_errors(config, seed):
    """Relative errors of autodiff vs finite differences for every parameter
    block, for z, and for the whole gradient vector ("all")."""
    r = np.random.default_rng(seed)
    m = TimeFlowModel.create(config, r)
    params = {k: v.copy() for k, v in m.named_parameters().items()}
    ts = r.uniform(0, 1, size=7)
    y = r.normal(size=7)
    z0 = r.normal(size=config.latent_dim) * 0.5

    nodes = {k: ad.variable(v) for k, v in params.items()}
    zn = ad.variable(z0[None, :])
    loss = ad.mse(m.forward_graph(m.embed(ts), nodes, zn, np.zeros(7, dtype=np.intp)), y)
    names = list(nodes)
    grads = ad.grad(loss, [nodes[k] for k in names] + [zn])
    errs = {}
    autodiff_all, fd_all = [], []
    for k, g in zip(names, grads):
        def f(x, k=k):
            p = dict(params)
            p[k] = x
            return np.mean((np_forward(p, config.depth, config.num_frequencies, z0, ts) - y) ** 2)
        fd = central_diff(f, params[k])
        errs[k] = rel_err(g.value, fd)
        autodiff_all.append(g.value.ravel())
        fd_all.append(fd.ravel())
    fz = lambda x: np.mean((np_forward(params, config.depth, config.num_frequencies, x, ts) - y) ** 2)
    fd = central_diff(fz, z0)
    errs["z"] = rel_err(grads[-1].value[0], fd)
    errs["all"] = rel_err(np.concatenate(autodiff_all + [grads[-1].value[0]]), np.concatenate(fd_all + [fd]))
    return errs
