"""Independent reference checks run by ``wmeval oracle-check``.

Each oracle recomputes an expected value by a route that does not share code
with the library function under test (explicit loops, enumeration, finite
differences) and compares.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from wmeval import diffusion, env, metrics, neural, tokens


@dataclass
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


class OracleFailure(AssertionError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise OracleFailure(msg)


# ---------------------------------------------------------------------------
# neural / loss


def verification_build(seed: int = 0, width: int = 4, height: int = 4, capacity: int = 1, chunk_size: int = 2):
    """A small float64 model (d=64) on a short layout, plus one fixed loss batch."""
    vocab = tokens.Vocabulary()
    layout = tokens.make_layout(width, height, capacity, chunk_size)
    cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=64, n_layers=2, n_heads=4, seed=seed, dtype="float64")
    model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
    rng = np.random.default_rng(seed)
    s = env.reset(seed + 100, 6, 6)
    frames = []
    for a in env.random_legal_actions(s, 2 * chunk_size, rng):
        frames.append(env.render(s)[:height, :width])
        s = env.step(s, a)
    mem = tokens.push_keyframe(tokens.KeyframeMemory(capacity, chunk_size), 0, frames[0])
    chunk = tuple(env.ACTIONS[int(i)] for i in rng.integers(len(env.ACTIONS), size=chunk_size))
    rows = [
        tokens.build_sequence(vocab, layout, m, "move red to mark", frames[chunk_size], chunk, env.render(s)[:height, :width], 0.4).ids
        for m in (mem, tokens.KeyframeMemory(capacity, chunk_size))
    ]
    clean = np.stack(rows)
    lam = np.array([0.6, 0.9])
    batch = diffusion.make_loss_batch(clean, layout, vocab, lam, diffusion.make_schedule(), rng)
    return model, batch


def gradient_oracle(n_samples: int = 50, h: float = 1e-3, tol: float = 1e-4, seed: int = 0, mutate: bool = False) -> str:
    """Central differences against autograd on sampled coordinates of every tensor."""
    model, batch = verification_build(seed)
    _, grads = neural.loss_and_grad(model, batch)
    if mutate:
        name = next(iter(grads))
        grads = dict(grads)
        grads[name] = grads[name] * 1.01 + 1e-3

    def loss_at() -> float:
        with torch.no_grad():
            logits = model(torch.as_tensor(batch.ids), torch.as_tensor(batch.lam, dtype=torch.float64))
            return float(neural.weighted_loss(logits, batch))

    rng = np.random.default_rng(seed + 1)
    params = dict(model.named_parameters())
    names = list(params)
    picks = [(n, None) for n in names]
    while len(picks) < max(n_samples, len(names)):
        picks.append((names[int(rng.integers(len(names)))], None))
    worst = 0.0
    checked = 0
    for name, _ in picks:
        p, g = params[name], grads[name]
        flat_g = g.reshape(-1)
        live = torch.nonzero(flat_g.abs() > 1e-4).reshape(-1)
        pool = live if live.numel() else torch.arange(flat_g.numel())
        idx = int(pool[int(rng.integers(pool.numel()))])
        with torch.no_grad():
            flat = p.view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = loss_at()
            flat[idx] = orig - h
            down = loss_at()
            flat[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(flat_g[idx])
        denom = max(abs(numeric), abs(analytic), 1e-8)
        rel = abs(numeric - analytic) / denom
        if abs(numeric) < 1e-9 and abs(analytic) < 1e-9:
            rel = 0.0
        worst = max(worst, rel)
        checked += 1
        _check(rel < tol, f"{name}[{idx}]: analytic {analytic:.9g} vs numeric {numeric:.9g} (rel {rel:.2e})")
    return f"{checked} coordinates over {len(names)} tensors, worst relative error {worst:.2e}"


def mask_rate_oracle(n_positions: int = 12_000, tol: float = 0.02, seed: int = 0) -> str:
    vocab = tokens.Vocabulary()
    layout = tokens.make_layout(12, 12, 4, 4)
    n_rows = math.ceil(n_positions / (layout.length - layout.context_end))
    clean = np.zeros((n_rows, layout.length), dtype=np.int64)
    clean[:, layout["progress"].offset] = vocab.progress_id(0.0)
    rng = np.random.default_rng(seed)
    sched = diffusion.make_schedule()
    out = []
    for lam in np.round(np.arange(0.1, 0.95, 0.1), 2):
        _, mask = diffusion.mask_batch(clean, layout, vocab, lam, sched, rng)
        frac = mask[:, layout.context_end :].mean()
        _check(not mask[:, : layout.context_end].any(), "context position masked")
        _check(abs(frac - lam) <= tol, f"lambda={lam}: mask fraction {frac:.4f}")
        out.append(f"{lam:g}:{frac:.3f}")
    return " ".join(out)


def loss_limit_oracle(tol: float = 1e-6, seed: int = 0) -> str:
    """At lambda=1 with unit weights the loss is the mean target cross-entropy."""
    model, batch = verification_build(seed)
    layout = model.layout
    vocab = tokens.Vocabulary()
    rng = np.random.default_rng(seed)
    full = diffusion.make_loss_batch(batch.clean, layout, vocab, np.ones(2), diffusion.make_schedule(), rng, 1.0, 1.0)
    with torch.no_grad():
        logits = model(torch.as_tensor(full.ids), torch.as_tensor(full.lam, dtype=torch.float64))
        got = float(neural.weighted_loss(logits, full))
        expected = []
        for b in range(full.ids.shape[0]):
            ces = []
            for j in range(layout.context_end, layout.length):
                if full.clean[b, j] == vocab.pad_id:
                    continue
                row = logits[b, j].numpy()
                lse = row.max() + math.log(np.exp(row - row.max()).sum())
                ces.append(lse - row[full.clean[b, j]])
            expected.append(sum(ces) / len(ces))
    ref = float(np.mean(expected))
    _check(abs(got - ref) <= tol, f"loss {got!r} vs mean CE {ref!r}")
    return f"loss {got:.9f} = mean CE {ref:.9f}"


def smoke_training_oracle(steps: int = 500, seed: int = 0) -> str:
    """A tiny model on a small expert set must cut its loss in half."""
    w = h = 6
    vocab = tokens.Vocabulary()
    layout = tokens.make_layout(w, h, 2, 2)
    trajs = env.collect_trajectories(env.PolicySpec(), 50, 2, 24, seed, w, h)
    clean = diffusion.stack_sequences(trajs, vocab, layout)
    cfg = neural.ModelConfig.for_layout(vocab, layout, d_model=32, n_layers=2, n_heads=4, seed=seed)
    torch.manual_seed(seed)
    model = neural.WorldModelNet(cfg, layout, vocab.pad_id)
    opt = neural.AdamW(model, 3e-3, weight_decay=0.01)
    rng = np.random.default_rng(seed)
    sched = diffusion.make_schedule()
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(clean), size=16)
        losses.append(diffusion.train_step(model, opt, clean[idx], vocab, sched, rng).loss)
    first = float(np.mean(losses[:10]))
    last = float(np.mean(losses[-10:]))
    _check(last < 0.5 * first, f"loss {first:.3f} -> {last:.3f}")
    return f"loss {first:.3f} -> {last:.3f}"


def quota_oracle() -> str:
    for n, s in [(145, 16), (37, 16), (5, 16), (217, 8), (0, 4)]:
        q = diffusion.unmask_quotas(n, s)
        _check(sum(q) == n, f"quotas for {n}/{s} sum to {sum(q)}")
        nz = [x for x in q if x]
        _check(not nz or max(nz) - min(nz) <= 1, f"quotas for {n}/{s} uneven: {q}")
    return "quota sums and spread ok"


# ---------------------------------------------------------------------------
# environment


def invertibility_oracle(n_seeds: int = 100, length: int = 20, width: int = 12, height: int = 12) -> str:
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        s0 = env.reset(seed, width, height)
        acts = env.random_legal_actions(s0, length, rng)
        s = s0
        for a in acts:
            s = env.step(s, a)
        for a in reversed(acts):
            _check(env.is_legal(s, env.inverse(a)), f"seed {seed}: inverse of {a} illegal")
            s = env.step(s, env.inverse(a))
        diff = int((env.render(s) != env.render(s0)).sum())
        _check(diff == 0, f"seed {seed}: {diff} mismatched cells")
    return f"{n_seeds} trajectories of {length} steps restored exactly"


def reset_diversity_oracle() -> str:
    layouts = {(env.reset(i).items, env.reset(i).gripper, env.reset(i).goal) for i in range(32)}
    _check(len(layouts) >= 30, f"only {len(layouts)} distinct layouts")
    return f"{len(layouts)} distinct layouts in 32 seeds"


def expert_oracle(n_seeds: int = 100, width: int = 12, height: int = 12) -> str:
    budget = 4 * (width + height)
    for seed in range(n_seeds):
        s = env.reset(seed, width, height)
        for _ in range(budget):
            if env.is_success(s):
                break
            s = env.step(s, env.expert_action(s))
        _check(env.is_success(s), f"expert fails on seed {seed}")
    return f"expert solves seeds 0..{n_seeds - 1} within {budget} steps"


def uniform_noise_oracle(n_draws: int = 10_000, seed: int = 0) -> str:
    """epsilon=1 draws are uniform over the legal actions (chi-square, 1% level)."""
    s = env.reset(3)
    legal = env.legal_actions(s)
    spec = env.PolicySpec("epsilon_noisy", epsilon=1.0)
    rng = np.random.default_rng(seed)
    counts = dict.fromkeys(legal, 0)
    for _ in range(n_draws):
        a = env.policy_act(spec, s, rng)
        _check(a in counts, f"illegal action {a}")
        counts[a] += 1
    exp = n_draws / len(legal)
    chi2 = sum((c - exp) ** 2 / exp for c in counts.values())
    dof = len(legal) - 1
    # Wilson-Hilferty approximation of the 99% chi-square quantile
    crit = dof * (1 - 2 / (9 * dof) + 2.326 * math.sqrt(2 / (9 * dof))) ** 3
    _check(chi2 < crit, f"chi2={chi2:.1f} >= {crit:.1f}")
    return f"chi2={chi2:.1f} < {crit:.1f} (dof {dof})"


def pooling_oracle() -> str:
    for block in itertools.product(range(env.PALETTE_SIZE), repeat=4):
        counts = {c: block.count(c) for c in set(block)}
        top = max(counts.values())
        want = min(c for c, k in counts.items() if k == top)
        got = int(tokens.pool_majority(np.array(block).reshape(2, 2))[0, 0])
        if got != want:
            raise OracleFailure(f"pool {block}: {got} != {want}")
    return f"all {env.PALETTE_SIZE ** 4} 2x2 blocks"


def layout_oracle() -> str:
    layout = tokens.make_layout(12, 12, 4, 4)
    want = {"history": 4 * (tokens.INDEX_DIGITS + 36), "current": 144, "actions": 4, "target": 144, "progress": 1}
    for name, n in want.items():
        _check(layout[name].length == n, f"{name}: {layout[name].length} != {n}")
    vocab = tokens.Vocabulary()
    ids = {vocab.action_id(a) for a in env.ACTIONS}
    _check(len(ids) == 27, "action ids collide")
    return f"L={layout.length}, 27 distinct action ids"


# ---------------------------------------------------------------------------
# metrics


def _brute_delta(pred, true, base: metrics.FrameDistance) -> float:
    table = base.table
    vals = []
    for t in range(len(pred) - 1):
        h, w = np.asarray(pred[0]).shape
        dp = [[table[pred[t + 1][y][x]] - table[pred[t][y][x]] for x in range(w)] for y in range(h)]
        dt = [[table[true[t + 1][y][x]] - table[true[t][y][x]] for x in range(w)] for y in range(h)]
        normed = []
        for d in (dp, dt):
            sq = sum(float(v) ** 2 for row in d for cell in row for v in cell)
            count = h * w * table.shape[1]
            rms = math.sqrt(sq / count)
            normed.append([[cell / rms if rms > 0 else cell * 0 for cell in row] for row in d])
        total = 0.0
        for y in range(h):
            for x in range(w):
                diff = normed[0][y][x] - normed[1][y][x]
                if base.kind == "mismatch_rate":
                    total += float(any(abs(v) > 1e-12 for v in diff))
                else:
                    total += math.sqrt(sum(float(v) ** 2 for v in diff))
        vals.append(total / (h * w))
    return sum(vals) / len(vals)


def delta_dist_oracle(n_cases: int = 20, seed: int = 0, tol: float = 1e-6) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_cases):
        n = int(rng.integers(2, 5))
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        true = [rng.integers(0, env.PALETTE_SIZE, size=(h, w)) for _ in range(n)]
        pred = [np.where(rng.random((h, w)) < 0.3, rng.integers(0, env.PALETTE_SIZE, size=(h, w)), f) for f in true]
        if i % 5 == 0:
            pred[1] = pred[0].copy()  # a static predicted pair
        for kind in ("embedded_l2", "mismatch_rate"):
            base = metrics.FrameDistance(kind, seed=i)
            got = metrics.delta_dist(pred, true, 1, base)
            ref = _brute_delta(pred, true, base)
            worst = max(worst, abs(got - ref))
            _check(abs(got - ref) <= tol, f"case {i} {kind}: {got} vs {ref}")
    # hand toy: object moves right in truth, left in the prediction
    a = np.zeros((1, 5), dtype=np.int64)
    a[0, 2] = env.OBJECT_BASE
    right, left = np.roll(a, 1, axis=1), np.roll(a, -1, axis=1)
    toy_true, toy_pred = [a, right, np.roll(right, 1, axis=1)], [a, left, np.roll(left, -1, axis=1)]
    base = metrics.FrameDistance()
    got, ref = metrics.delta_dist(toy_pred, toy_true, 1, base), _brute_delta(toy_pred, toy_true, base)
    _check(abs(got - ref) <= tol and got > 0, f"toy: {got} vs {ref}")
    return f"{n_cases} random cases x 2 bases + toy, worst |diff| {worst:.1e}"


def _brute_mmrv(r, s) -> float:
    n = len(r)
    worst = []
    for i in range(n):
        w = 0.0
        for j in range(n):
            if (r[i] < r[j] and s[i] > s[j]) or (r[i] > r[j] and s[i] < s[j]):
                w = max(w, abs(r[i] - r[j]))
        worst.append(w)
    return math.fsum(worst) / n


def mmrv_oracle(n_cases: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        n = int(rng.integers(2, 9))
        # coarse grids make ties common
        r = rng.integers(0, 11, size=n) / 10
        s = rng.integers(0, 11, size=n) / 10
        got, ref = metrics.mmrv(r, s), _brute_mmrv(list(r), list(s))
        _check(got == ref, f"case {i}: mmrv({list(r)}, {list(s)}) = {got} != {ref}")
    _check(abs(metrics.mmrv([0.2, 0.8], [0.9, 0.1]) - 0.6) < 1e-12, "two-policy example")
    return f"{n_cases} random rate vectors match exactly"


def pearson_oracle(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(50):
        x = rng.standard_normal(int(rng.integers(2, 20)))
        a, b = rng.uniform(0.1, 5), rng.standard_normal()
        _check(abs(metrics.pearson(x, a * x + b) - 1.0) <= 1e-9, "affine increasing")
        _check(abs(metrics.pearson(x, -a * x + b) + 1.0) <= 1e-9, "affine decreasing")
    x, y = [1, 2, 3, 4], [1, 3, 2, 4]
    mx, my = sum(x) / 4, sum(y) / 4
    cov = sum((p - mx) * (q - my) for p, q in zip(x, y))
    ref = cov / math.sqrt(sum((p - mx) ** 2 for p in x) * sum((q - my) ** 2 for q in y))
    _check(abs(metrics.pearson(x, y) - ref) <= 1e-12 and abs(ref - 0.8) <= 1e-12, "hand example")
    return "affine cases hit +-1, hand example r=0.8"


def judge_oracle(n_seeds: int = 200) -> str:
    """Frame judge agrees with the simulator on every state visited by noisy experts."""
    spec = env.PolicySpec("epsilon_noisy", epsilon=0.3)
    n = 0
    for seed in range(n_seeds):
        s = env.reset(seed, 8, 8)
        rng = env.policy_rng(spec, seed)
        for _ in range(30):
            _check(metrics.frame_success_judge(env.render(s), s.goal) == env.is_success(s), f"seed {seed}: judge disagrees")
            n += 1
            s = env.step(s, env.policy_act(spec, s, rng))
    return f"{n} states"


ORACLES: dict[str, Callable[..., str]] = {
    "gradient": gradient_oracle,
    "mask_rate": mask_rate_oracle,
    "loss_limit": loss_limit_oracle,
    "quota": quota_oracle,
    "invertibility": invertibility_oracle,
    "reset_diversity": reset_diversity_oracle,
    "expert": expert_oracle,
    "uniform_noise": uniform_noise_oracle,
    "pooling": pooling_oracle,
    "layout": layout_oracle,
    "delta_dist": delta_dist_oracle,
    "mmrv": mmrv_oracle,
    "pearson": pearson_oracle,
    "frame_judge": judge_oracle,
    "smoke_training": smoke_training_oracle,
}


def run_all(mutate_gradient: bool = False, only: list[str] | None = None) -> list[OracleResult]:
    results = []
    for name, fn in ORACLES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            detail = fn(mutate=True) if (name == "gradient" and mutate_gradient) else fn()
            ok = True
        except OracleFailure as exc:
            detail, ok = str(exc), False
        results.append(OracleResult(name, ok, detail, time.perf_counter() - t0))
    return results
