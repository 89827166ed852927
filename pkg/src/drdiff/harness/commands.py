"""Experiment runners behind the CLI subcommands.

Every runner takes a validated :class:`RunConfig` and an output directory and
writes one primary CSV named after the subcommand (header row, fixed column
order, values that depend only on config and seed). Wall-clock measurements
go to a separate ``timing.csv`` so the primary CSV stays byte-reproducible.
The resolved configuration is echoed to ``config.ini``.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np

from ..attention import flop_account, masked_attention
from ..denoiser import (
    AnchorSpec,
    ModelConfig,
    OptimConfig,
    TrainState,
    batch_loss_and_grads,
    init_params,
    init_state,
    load_checkpoint,
    make_eps_fn,
    model_flops,
    random_batch,
    round_to_tokens,
    save_checkpoint,
    train_step,
)
from ..diffusion import build_anchor_targets, default_segment_count, make_schedule
from ..hsa import MODES, build_hsa_mask, fit_exponent, mask_dense
from ..numerics import Rng, gaussian
from ..sampler import gaussian_oracle, make_config, sample
from .config import ConfigError, RunConfig, parse_toggle
from .corpus import Corpus, ingest, synthetic_corpus

# rng stream indices, fixed so that every subcommand draws from disjoint streams
_S_CORPUS, _S_INIT, _S_TRAIN, _S_EVAL, _S_SAMPLE, _S_BENCH = range(6)


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return int(value)
    return value


def write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row[h]) for h in header])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _prepare(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    return out


def median_ms(fn, reps: int) -> float:
    """Median wall time of ``fn()`` in milliseconds; one warm-up call is discarded."""
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


# shared pieces -------------------------------------------------------------------------


def load_corpus(cfg: RunConfig) -> Corpus:
    t = cfg.train
    if t.corpus:
        corpus = ingest(t.corpus, t.vocab_file or None)
        if corpus.size > 256:
            raise ConfigError(f"corpus vocabulary has {corpus.size} entries; at most 256 supported")
        return corpus
    rng = Rng(cfg.run.seed).stream(_S_CORPUS)
    return synthetic_corpus(cfg.model.vocab, 64, 4 * t.n, rng)


def _anchor_spec(cfg: RunConfig, T: int) -> AnchorSpec:
    ts = cfg.anchor_timesteps(T)
    return AnchorSpec(ts, cfg.lambdas(len(ts)), cfg.diffusion.segment_count or None)


def _draw_batch(state: TrainState, windows: np.ndarray, batch_size: int, sched):
    idx = state.rng.integers(0, windows.shape[0], batch_size)
    return random_batch(state.params, list(windows[idx]), sched, state.rng)


def _train_rows(metrics: dict, M: int) -> dict:
    row = {k: metrics[k] for k in ("step", "loss", "l_diff", "l_sas", "l_aux", "grad_norm", "lr")}
    for j in range(M):
        row[f"dispatch_{j}"] = metrics["dispatch"][j]
    return row


def _eval_loss(cfg: RunConfig, state: TrainState, windows: np.ndarray, sched, anchor_spec: AnchorSpec) -> dict:
    """Loss components on a fixed evaluation batch (same draw for every cell)."""
    rng = Rng(cfg.run.seed).stream(_S_EVAL)
    idx = rng.integers(0, windows.shape[0], cfg.train.batch_size)
    batch = random_batch(state.params, list(windows[idx]), sched, rng)
    anchors = [anchor_spec.build(z0, sched, rng) for z0, _, _ in batch]
    metrics, _, _ = batch_loss_and_grads(state.params, batch, sched, anchors,
                                         cfg.diffusion.lambda_aux, need_grads=False)
    return metrics


def smoke_train(cfg: RunConfig, steps: int, optim: OptimConfig, corpus: Corpus | None = None):
    """Short training run from a fresh initialisation; returns ``(state, eval_metrics)``."""
    corpus = corpus or load_corpus(cfg)
    windows = corpus.windows(cfg.train.n)
    mcfg = cfg.model_config(corpus.size if cfg.train.corpus else None)
    root = Rng(cfg.run.seed)
    state = init_state(init_params(mcfg, root.stream(_S_INIT)), root.stream(_S_TRAIN), optim)
    sched = make_schedule(cfg.diffusion.schedule, cfg.diffusion.T)
    anchor_spec = _anchor_spec(cfg, cfg.diffusion.T)
    for _ in range(steps):
        batch = _draw_batch(state, windows, cfg.train.batch_size, sched)
        train_step(state, batch, sched, anchor_spec, cfg.diffusion.lambda_aux)
    return state, _eval_loss(cfg, state, windows, sched, anchor_spec)


# subcommands ---------------------------------------------------------------------------


def cmd_build_mask(cfg: RunConfig, out) -> list[dict]:
    """Write the HSA mask for ``[mask] n`` / ``layer`` as a text dump plus a summary row."""
    out = _prepare(cfg, out)
    hcfg = cfg.hsa_config()
    n, layer = cfg.mask.n, cfg.mask.layer
    mask = build_hsa_mask(hcfg, n, layer)
    (out / "mask.txt").write_text(mask.dumps(), encoding="utf-8")
    row = {"run": cfg.run_id(), "n": n, "layer": layer, "mode": mask.mode, "nnz": mask.nnz,
           "density": mask.nnz / (n * n), "flops": flop_account(mask, cfg.model.d, cfg.model.heads)}
    rows = [row]
    write_csv(out / "build_mask.csv", list(row), rows)
    return rows


TRAIN_FIELDS = ["run", "step", "loss", "l_diff", "l_sas", "l_aux", "grad_norm", "lr"]


def cmd_train(cfg: RunConfig, out) -> list[dict]:
    """Train for ``[train] steps`` optimizer steps, resuming from ``[train] resume`` if set.

    Writes ``train.csv`` (one row per step taken in this invocation),
    ``checkpoint.npz`` and ``vocab.txt``.
    """
    out = _prepare(cfg, out)
    t = cfg.train
    corpus = load_corpus(cfg)
    windows = corpus.windows(t.n)
    mcfg = cfg.model_config(corpus.size if t.corpus else None)
    root = Rng(cfg.run.seed)
    if t.resume:
        state = load_checkpoint(t.resume)
        if state.params.cfg.to_dict() != mcfg.to_dict():
            raise ConfigError("checkpoint model configuration differs from the configured model")
        if state.step > t.steps:
            raise ConfigError(f"checkpoint is at step {state.step}, beyond train.steps={t.steps}")
        state.optim = cfg.optim_config()
    else:
        state = init_state(init_params(mcfg, root.stream(_S_INIT)), root.stream(_S_TRAIN), cfg.optim_config())
    sched = make_schedule(cfg.diffusion.schedule, cfg.diffusion.T)
    anchor_spec = _anchor_spec(cfg, cfg.diffusion.T)
    run = cfg.run_id()
    rows = []
    t0 = time.perf_counter()
    while state.step < t.steps:
        batch = _draw_batch(state, windows, t.batch_size, sched)
        _, metrics = train_step(state, batch, sched, anchor_spec, cfg.diffusion.lambda_aux)
        rows.append({"run": run, **_train_rows(metrics, mcfg.n_experts)})
        if t.checkpoint_every and state.step % t.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{state.step:06d}.npz", state)
    elapsed = time.perf_counter() - t0
    save_checkpoint(out / "checkpoint.npz", state)
    (out / "vocab.txt").write_text(corpus.vocab_text(), encoding="utf-8")
    header = TRAIN_FIELDS + [f"dispatch_{j}" for j in range(mcfg.n_experts)]
    write_csv(out / "train.csv", header, rows)
    write_csv(out / "timing.csv", ["steps", "seconds"], [{"steps": len(rows), "seconds": elapsed}])
    return rows


def _vocab_for(checkpoint: str) -> list[str] | None:
    if not checkpoint:
        return None
    path = Path(checkpoint).with_name("vocab.txt")
    return path.read_text(encoding="utf-8").splitlines() if path.is_file() else None


def cmd_sample(cfg: RunConfig, out) -> list[dict]:
    """Generate ``[sample] count`` sequences; write token-id dump, summary CSV and timing."""
    out = _prepare(cfg, out)
    s = cfg.sample
    root = Rng(cfg.run.seed)
    if s.checkpoint:
        params = load_checkpoint(s.checkpoint).params
    else:
        params = init_params(cfg.model_config(), root.stream(_S_INIT))
    sched = make_schedule(cfg.diffusion.schedule, cfg.diffusion.T)
    scfg = make_config(cfg.diffusion.T, s.steps, s.order, s.spacing, sched)
    guidance = None
    if s.guidance_eta > 0:
        prompt = params["embed"][load_corpus(cfg).windows(s.n)[0]]
        ts = cfg.anchor_timesteps()
        anchors = build_anchor_targets(prompt, sched, ts, cfg.diffusion.segment_count or default_segment_count(s.n),
                                       root.stream(_S_SAMPLE).stream(10**6), cfg.lambdas(len(ts)))
        guidance = (anchors, s.guidance_eta)
    eps_fn = make_eps_fn(params)
    streams = root.stream(_S_SAMPLE)
    vocab = _vocab_for(s.checkpoint)
    run = cfg.run_id()
    rows, timing, dump, text = [], [], [], []
    for i in range(s.count):
        t0 = time.perf_counter()
        z = sample(eps_fn, s.n, params.cfg.d, scfg, sched, streams.stream(i), guidance=guidance)
        timing.append({"index": i, "seconds": time.perf_counter() - t0})
        toks = round_to_tokens(z, params["embed"])
        dump.append(" ".join(str(int(x)) for x in toks))
        if vocab is not None:
            text.append(" ".join(vocab[int(x)] if int(x) < len(vocab) else "<unk>" for x in toks))
        rows.append({"run": run, "index": i, "n": s.n, "steps": scfg.steps_S, "order": s.order,
                     "distinct_tokens": int(np.unique(toks).size), "latent_rms": float(np.sqrt(np.mean(z**2)))})
    (out / "samples.txt").write_text("".join(line + "\n" for line in dump), encoding="utf-8")
    if text:
        (out / "samples_text.txt").write_text("".join(line + "\n" for line in text), encoding="utf-8")
    write_csv(out / "sample.csv", ["run", "index", "n", "steps", "order", "distinct_tokens", "latent_rms"], rows)
    write_csv(out / "timing.csv", ["index", "seconds"], timing)
    return rows


def bench_fits(rows: list[dict]) -> list[dict]:
    """Log-log nnz exponent per bracket (brackets with at least three lengths)."""
    fits = []
    for mode in MODES:
        sel = [r for r in rows if r["mode"] == mode]
        if len(sel) >= 3:
            lengths = [r["length"] for r in sel]
            fits.append({"mode": mode, "points": len(sel), "min_length": min(lengths),
                         "max_length": max(lengths),
                         "nnz_exponent": fit_exponent(lengths, [r["nnz"] for r in sel]),
                         "flops_exponent": fit_exponent(lengths, [r["flops"] for r in sel])})
    return fits


def cmd_bench(cfg: RunConfig, out) -> list[dict]:
    """Mask size and flop account per length, scaling fits per bracket, attention timings.

    ``bench.csv``: ``length,mode,nnz,flops``; ``bench_fit.csv``: exponents per
    bracket; ``timing.csv``: median forward time of masked attention on the
    HSA mask and (up to ``dense_time_max``) on the dense mask.
    """
    out = _prepare(cfg, out)
    b = cfg.bench
    hcfg = cfg.hsa_config()
    rows = []
    for n in sorted(set(b.lengths)):
        mask = build_hsa_mask(hcfg, n, 0)
        rows.append({"length": n, "mode": mask.mode, "nnz": mask.nnz, "flops": flop_account(mask, b.d, b.heads)})
    write_csv(out / "bench.csv", ["length", "mode", "nnz", "flops"], rows)
    fits = bench_fits(rows)
    write_csv(out / "bench_fit.csv", ["mode", "points", "min_length", "max_length", "nnz_exponent",
                                      "flops_exponent"], fits)
    rng = Rng(cfg.run.seed).stream(_S_BENCH)
    dh = b.d // b.heads
    timing = []
    for n in sorted(set(b.time_lengths)):
        Q, K, V = (gaussian(rng, n, dh) for _ in range(3))
        mask = build_hsa_mask(hcfg, n, 0)
        hsa_ms = median_ms(lambda: masked_attention(Q, K, V, mask), b.reps)
        dense_ms = ""
        if n <= b.dense_time_max:
            dense = mask_dense(n)
            dense_ms = median_ms(lambda: masked_attention(Q, K, V, dense), b.reps)
            del dense
        timing.append({"length": n, "mode": mask.mode, "hsa_ms": hsa_ms, "dense_ms": dense_ms,
                       "ratio": hsa_ms / dense_ms if dense_ms != "" else ""})
    write_csv(out / "timing.csv", ["length", "mode", "hsa_ms", "dense_ms", "ratio"], timing)
    return rows


def apply_toggle(cfg: RunConfig, toggle: str) -> RunConfig:
    """Configuration for one ablation cell (a validated copy)."""
    name, value = parse_toggle(toggle)
    cell = copy.deepcopy(cfg)
    if name in ("no_hsa", "no_both"):
        cell.model.fixed_window = 256
    if name in ("no_des", "no_both"):
        cell.model.capacities = [1.0] * cell.model.n_experts
        cell.model.k = min(2, cell.model.n_experts)
    if name == "steps":
        cell.diffusion.T = value
    if name == "window":
        mode = cfg.hsa_config().mode_for(cfg.ablate.eval_n)
        key = {"4k": "w4k", "8k": "w8k", "16k+": "w16k"}.get(mode)
        if key is None:
            raise ConfigError(f"window toggle needs ablate.eval_n beyond the dense bracket (got {cfg.ablate.eval_n})")
        setattr(cell.hsa, key, value)
    return cell.validate()


ABLATE_FIELDS = ["run", "toggle", "T", "mode", "window", "homogeneous_experts", "loss", "l_diff", "l_sas",
                 "l_aux", "nnz", "flops"]


def cmd_ablate(cfg: RunConfig, out) -> list[dict]:
    """One smoke-trained cell per toggle; loss at training length, attention cost at ``eval_n``."""
    out = _prepare(cfg, out)
    a = cfg.ablate
    cells = [(tog, apply_toggle(cfg, tog)) for tog in a.toggles]
    optim = OptimConfig(lr=a.lr, warmup=a.warmup, weight_decay=cfg.train.weight_decay, clip=cfg.train.clip)
    corpus = load_corpus(cfg)
    run = cfg.run_id()
    rows, timing = [], []
    for tog, cell in cells:
        t0 = time.perf_counter()
        state, metrics = smoke_train(cell, a.train_steps, optim, corpus)
        mcfg: ModelConfig = state.params.cfg
        nnz, flops = model_flops(mcfg, a.eval_n)
        timing.append({"toggle": tog, "seconds": time.perf_counter() - t0})
        mode = "local" if mcfg.fixed_window else mcfg.hsa.mode_for(a.eval_n)
        window = mcfg.fixed_window or {"dense": 0, "4k": mcfg.hsa.w4k, "8k": mcfg.hsa.w8k,
                                       "16k+": mcfg.hsa.w16k}[mode]
        rows.append({"run": run, "toggle": tog, "T": cell.diffusion.T, "mode": mode, "window": window,
                     "homogeneous_experts": len(set(mcfg.capacities)) == 1,
                     "loss": metrics["loss"], "l_diff": metrics["l_diff"], "l_sas": metrics["l_sas"],
                     "l_aux": metrics["l_aux"], "nnz": nnz, "flops": flops})
    write_csv(out / "ablate.csv", ABLATE_FIELDS, rows)
    write_csv(out / "timing.csv", ["toggle", "seconds"], timing)
    return rows


def oracle_moment_error(kind: str, T: int, S: int, order: int, trajectories: int, rng: Rng):
    """``(|mean|, |var - 1|)`` of the sampler driven by the unit-Gaussian oracle."""
    sched = make_schedule(kind, T)
    z = sample(gaussian_oracle(sched), trajectories, 1, make_config(T, S, order, "uniform", sched), sched, rng)
    return abs(float(z.mean())), abs(float(z.var()) - 1.0)


def token_overlap(seqs: list[np.ndarray]) -> float:
    """Mean fraction of positions on which two sequences agree, over all pairs."""
    pairs = list(itertools.combinations(seqs, 2))
    return float(np.mean([np.mean(a == b) for a, b in pairs]))


SWEEP_FIELDS = ["run", "kind", "T", "lambda_sas", "loss", "l_diff", "l_sas", "l_aux", "mean_error",
                "var_error", "token_overlap"]


def cmd_sweep(cfg: RunConfig, out) -> list[dict]:
    """Grid over schedule kind x diffusion steps x anchor weight, in declared order."""
    out = _prepare(cfg, out)
    w = cfg.sweep
    optim = OptimConfig(lr=w.lr, warmup=w.warmup, weight_decay=cfg.train.weight_decay, clip=cfg.train.clip)
    corpus = load_corpus(cfg)
    cells = []
    for kind, T, lam in itertools.product(w.kinds, w.steps, w.lambdas):
        cell = copy.deepcopy(cfg)
        cell.diffusion.schedule = kind
        cell.diffusion.T = T
        cell.diffusion.lambda_sas = [lam]
        cells.append((kind, T, lam, cell.validate()))
    run = cfg.run_id()
    rows, timing = [], []
    for idx, (kind, T, lam, cell) in enumerate(cells):
        state, metrics = smoke_train(cell, w.train_steps, optim, corpus)
        cell_rng = Rng(cfg.run.seed).stream(_S_SAMPLE).stream(idx)
        mean_err, var_err = oracle_moment_error(kind, T, w.sampler_steps, cfg.sample.order,
                                                w.oracle_trajectories, cell_rng.stream(0))
        sched = make_schedule(kind, T)
        scfg = make_config(T, w.sampler_steps, cfg.sample.order, "uniform", sched)
        eps_fn = make_eps_fn(state.params)
        seqs = []
        t0 = time.perf_counter()
        for s in range(w.seeds):
            z = sample(eps_fn, cfg.train.n, state.params.cfg.d, scfg, sched, cell_rng.stream(1 + s))
            seqs.append(round_to_tokens(z, state.params["embed"]))
        per_seq = (time.perf_counter() - t0) / w.seeds
        timing.append({"kind": kind, "T": T, "lambda_sas": lam, "seconds_per_sequence": per_seq})
        rows.append({"run": run, "kind": kind, "T": T, "lambda_sas": lam, "loss": metrics["loss"],
                     "l_diff": metrics["l_diff"], "l_sas": metrics["l_sas"], "l_aux": metrics["l_aux"],
                     "mean_error": mean_err, "var_error": var_err, "token_overlap": token_overlap(seqs)})
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    write_csv(out / "timing.csv", ["kind", "T", "lambda_sas", "seconds_per_sequence"], timing)
    return rows


PARAMS_FIELDS = ["run", "n_experts", "k", "total_params", "active_params", "router_params", "expert_params"]


def cmd_params(cfg: RunConfig, out) -> list[dict]:
    """Report total and active parameter counts as the expert count grows with k fixed.

    Every expert gets the same ``[params] capacity``. ``expert_params`` is the
    size of one expert in one layer.
    """
    out = _prepare(cfg, out)
    base = cfg.model_config()
    run = cfg.run_id()
    rows = []
    for M in cfg.params.expert_counts:
        mcfg = dataclasses.replace(base, n_experts=M, capacities=(cfg.params.capacity,) * M)
        params = init_params(mcfg, Rng(cfg.run.seed).stream(_S_INIT))
        rows.append({"run": run, "n_experts": M, "k": mcfg.k, "total_params": params.total_params(),
                     "active_params": params.active_params(), "router_params": params.router_params(),
                     "expert_params": params.expert_size(0, 0)})
    write_csv(out / "params.csv", PARAMS_FIELDS, rows)
    return rows


COMMANDS = {
    "build-mask": cmd_build_mask,
    "train": cmd_train,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "params": cmd_params,
}
