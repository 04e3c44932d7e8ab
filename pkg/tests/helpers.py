"""Shared test utilities."""

import torch


def sampled_gradient_check(module, loss_fn, n_params=120, seed=0, h=1e-6, floor=1e-7):
    """Compare autograd against central differences on randomly chosen scalar parameters.

    Returns the largest relative error ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero gradients from dominating. The module must be float64.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]

    g = torch.Generator().manual_seed(seed)
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    worst, checked = 0.0, 0
    with torch.no_grad():
        for _ in range(n_params):
            i = int(torch.multinomial(sizes, 1, generator=g))
            j = int(torch.randint(params[i].numel(), (1,), generator=g))
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[i].view(-1)[j].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
            checked += 1
    return worst, checked


def brute_force_count(first, last, length, stride):
    """Try every start and check that all sampled frames land inside the segment."""
    count = 0
    for s in range(first, last + 1):
        frames = [s + k * stride for k in range(length)]
        if all(first <= f <= last for f in frames):
            count += 1
    return count


def brute_force_auc(scores, positive):
    """Count ordered positive/negative pairs; ties count one half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))
