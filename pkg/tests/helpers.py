"""Shared oracles and fixtures used by both the unit and acceptance suites."""

import numpy as np
import torch

from caddiff import engine as E


def param_mini_batch(gen):
    """Fixed tiny parameter-stage batch: 2 rows, one with a PAD tail."""
    kinds = torch.tensor([
        [0, 0, 1, 2, 0, 0, 1, 0, 0, 1, 2, 3, 3, 3],
        [0, 0, 1, 0, 0, 2, 3, 3, 3, 3, 3, 3, 3, 3],
    ])
    owners = torch.tensor([
        [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, -1, -1, -1],
        [0, 0, 0, 1, 1, 1, -1, -1, -1, -1, -1, -1, -1, -1],
    ])
    rep = torch.where(owners >= 0, torch.tensor(2), torch.tensor(-1))
    eff = kinds != 3
    x0 = torch.randint(0, 256, kinds.shape, generator=gen)
    x0 = torch.where(eff, x0, torch.zeros_like(x0))
    x0 = torch.where(kinds == 2, x0 % 2, x0)   # booleans within the prior set
    return x0, kinds, owners, rep, eff


def fixed_batch(schedule, gen, t_corrupt=5):
    cmd0 = torch.randint(0, 6, (2, 8), generator=gen)
    par0, kinds, owners, rep, eff = param_mini_batch(gen)
    cmd_t = E._corrupt_batch(
        cmd0, torch.full_like(cmd0, int(E.PositionKind.COMMAND)), t_corrupt,
        schedule, gen,
    )
    par_t = E._corrupt_batch(par0, kinds, t_corrupt, schedule, gen)
    return cmd0, cmd_t, par0, par_t, kinds, owners, rep, eff


def joint_loss(nets, schedule, data, t):
    """Training loss (both stages) on a fixed batch, as in Trainer.step."""
    cmd0, cmd_t, par0, par_t, kinds, owners, rep, eff = data
    t_vec = torch.full((cmd0.shape[0],), t, dtype=torch.int64)
    cond = None
    if nets.length_cond is not None:
        cond = nets.condition_features(torch.tensor([4, 6]))
    cmd_logits = nets.cmd(cmd_t, t_vec, cond)
    loss = E._kl_mean(schedule, E.PositionKind.COMMAND, cmd0.reshape(-1),
                      cmd_t.reshape(-1), t, cmd_logits.reshape(-1, 6))
    tok_rows, cmd_rows = E._net_param_inputs(par_t, eff, rep)
    par_logits = nets.par(tok_rows, t_vec, cmd_rows, owners, eff)
    return loss + E._param_kl(schedule, par0, par_t, kinds, eff, t, par_logits)


def finite_difference_check(nets, schedule, data, t, n_coords=3, eps=1e-5,
                            seed=0):
    """Central differences vs autograd on random coordinates of every tensor.

    Relative error below 1e-4 is required wherever the gradient is resolvable;
    an absolute floor of 1e-9 absorbs the O(u*|L|/eps) roundoff of the central
    difference itself, far below any meaningful gradient here.
    """
    loss = joint_loss(nets, schedule, data, t)
    nets.zero_grad()
    loss.backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in nets.named_parameters()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for name, p in nets.named_parameters():
        flat = p.data.view(-1)
        n = flat.numel()
        for i in rng.choice(n, size=min(n_coords, n), replace=False):
            old = flat[i].item()
            flat[i] = old + eps
            with torch.no_grad():
                lp = float(joint_loss(nets, schedule, data, t))
            flat[i] = old - eps
            with torch.no_grad():
                lm = float(joint_loss(nets, schedule, data, t))
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            an = grads[name].view(-1)[i].item()
            gap = abs(fd - an)
            assert gap <= 1e-4 * max(abs(fd), abs(an)) + 1e-9, (
                f"{name}[{i}]: fd={fd:.3e} autograd={an:.3e} gap={gap:.2e}"
            )
            if max(abs(fd), abs(an)) > 1e-5:
                worst = max(worst, gap / max(abs(fd), abs(an)))
            checked += 1
    assert checked > 0
    return worst


def local_attention_isolation_trial(attn, rng):
    """One random layout: perturb one instance, other rows must not move."""
    from caddiff.denoiser import build_local_mask

    n_inst = int(rng.integers(2, 5))
    sizes = rng.integers(1, 4, size=n_inst)
    owners = np.repeat(np.arange(n_inst), sizes)
    owners = np.concatenate([owners, np.full(int(rng.integers(0, 3)), -1)])
    L = len(owners)
    mask = torch.from_numpy(build_local_mask(owners))
    d = attn.wq.weight.shape[1]
    x = torch.from_numpy(rng.normal(size=(1, L, d)))
    y = attn(x, x, mask=mask)
    target = int(rng.integers(0, n_inst))
    sel = owners == target
    x2 = x.clone()
    x2[0, sel] = torch.from_numpy(rng.normal(size=(int(sel.sum()), d)))
    y2 = attn(x2, x2, mask=mask)
    return torch.equal(y[0, ~sel], y2[0, ~sel])
