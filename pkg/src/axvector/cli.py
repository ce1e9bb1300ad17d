"""Command line pipeline driver.

Every stage of an experiment is a subcommand (gen-data, train, extract,
backend-fit, score, fuse, evaluate, det-export, sweep-n), so the whole run
is reproducible from a config file and seeds.  Numeric modules are imported
lazily inside the handlers so ``--threads`` can cap BLAS threading before
anything numerical loads.  All outputs are written atomically; a failed run
leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from statistics import NormalDist

OUT_ROOT_ENV = "AXVECTOR_OUT_ROOT"


def _out_path(path: str) -> str:
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_run_config(path: str | None):
    from .config import RunConfig
    cfg = RunConfig.from_file(path) if path else RunConfig.from_dict({})
    _log(f"resolved config:\n{cfg.resolved_json()}")
    return cfg


# ---------------------------------------------------------------------------
# corpus helpers
# ---------------------------------------------------------------------------


def _split_speakers(corpus):
    """(train_speakers, eval_speakers) using the split recorded at gen time."""
    eval_ids = set(corpus.meta.get("eval_speaker_ids", []))
    speakers = corpus.speakers()
    train = [s for s in speakers if s not in eval_ids]
    evals = [s for s in speakers if s in eval_ids]
    return train, evals


def _subset(corpus, which: str):
    train, evals = _split_speakers(corpus)
    if which == "all":
        return corpus
    if which == "train":
        return corpus.subset_by_speakers(train)
    if which == "eval":
        return corpus.subset_by_speakers(evals)
    raise ValueError(f"unknown subset {which!r}")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    import dataclasses

    from . import data

    cfg = _load_run_config(args.config)
    spec = cfg.corpus
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out_dir = _out_path(args.out)
    corpus = data.generate_corpus(spec)
    speakers = corpus.speakers()
    eval_ids = speakers[len(speakers) - cfg.split.eval_speakers:] if cfg.split.eval_speakers else []
    corpus.meta["eval_speaker_ids"] = eval_ids
    # build everything in memory first so a failure writes nothing
    trials = None
    if eval_ids:
        trials = data.generate_trials(corpus.subset_by_speakers(eval_ids),
                                      [cfg.split.trial_seed],
                                      cfg.split.n_target, cfg.split.n_nontarget)
    data.save_corpus(corpus, out_dir)
    if trials is not None:
        data.write_trials(os.path.join(out_dir, "trials.txt"), trials)
        _log(f"wrote {len(corpus)} utterances and {len(trials)} trials to {out_dir}")
    else:
        _log(f"wrote {len(corpus)} utterances to {out_dir} (no eval split)")
    return 0


ARCH_CHOICES = {"baseline": "baseline", "acnn": "acnn", "abn": "abn", "acnn-abn": "acnn_abn"}


def cmd_train(args) -> int:
    import dataclasses

    from . import data, model as M, training
    from .serialize import atomic_write_text

    cfg = _load_run_config(args.config)
    corpus = data.load_corpus(args.corpus)
    train_corpus = _subset(corpus, "train")
    arch = dataclasses.replace(cfg.arch, variant=ARCH_CHOICES[args.arch])
    arch.num_speakers = len(train_corpus.speakers())
    if args.pool_size is not None:
        arch.pool_size = args.pool_size
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    net = M.build(arch, seed=train_cfg.seed)
    _log(f"training {arch.variant}: {M.count_params(net)} parameters, "
         f"{len(train_corpus)} utterances, {arch.num_speakers} speakers")

    every = max(1, train_cfg.total_steps // 10)

    def progress(rec):
        if rec.step % every == 0 or rec.step == train_cfg.total_steps - 1:
            _log(f"  step {rec.step:5d}  lr {rec.lr:.3e}  loss {rec.loss:.4f}  "
                 f"acc {rec.accuracy:.3f}")

    out = _out_path(args.out)
    log = training.train(net, train_corpus, train_cfg, checkpoint_path=out,
                         progress=progress)
    log_path = args.log or out + ".log"
    atomic_write_text(_out_path(log_path), "".join(rec.line() + "\n" for rec in log))

    per_epoch = max(1, (len(train_corpus) + train_cfg.batch_size - 1) // train_cfg.batch_size)
    first = [r.loss for r in log[:per_epoch]]
    last = [r.loss for r in log[-per_epoch:]]
    accuracy = training.classification_accuracy(net, train_corpus)
    summary = {
        "variant": arch.variant,
        "steps": len(log),
        "first_epoch_mean_loss": sum(first) / len(first),
        "last_epoch_mean_loss": sum(last) / len(last),
        "final_train_accuracy": accuracy,
    }
    atomic_write_text(out + ".train.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _log(f"final train accuracy {accuracy:.3f}; checkpoint at {out}")
    return 0


def cmd_extract(args) -> int:
    from . import backend, data, model as M

    net = M.load_model(args.model)
    corpus = _subset(data.load_corpus(args.corpus), args.subset)
    table = backend.extract_embeddings(net, corpus)
    table.save(_out_path(args.out))
    _log(f"extracted {len(table)} embeddings of dimension {table.dim}")
    return 0


def cmd_backend_fit(args) -> int:
    import numpy as np

    from . import backend, data

    cfg = _load_run_config(args.config)
    corpus = data.load_corpus(args.corpus)
    train_corpus = _subset(corpus, "train")
    table = backend.EmbeddingTable.load(args.embeddings)
    ids = [u.utt_id for u in train_corpus.utterances]
    vectors = table.select(ids)
    speakers = train_corpus.speakers()
    label_of = {s: i for i, s in enumerate(speakers)}
    labels = np.array([label_of[train_corpus.utterance(u).speaker_id] for u in ids])
    lda_dim = args.lda_dim if args.lda_dim is not None else cfg.backend.lda_dim
    if lda_dim is None:
        lda_dim = min(100, len(speakers) - 1, vectors.shape[1])
    iters = args.plda_iters if args.plda_iters is not None else cfg.backend.plda_iterations
    transform = backend.preprocess_fit(vectors, labels, lda_dim)
    projected = backend.preprocess_apply(transform, vectors)
    plda = backend.plda_train(projected, labels, iterations=iters)
    backend.save_backend(_out_path(args.out), transform, plda)
    _log(f"backend fit on {len(ids)} embeddings: lda_dim={lda_dim}, "
         f"plda iterations={iters}, final loglik={plda.em_loglik[-1]:.2f}")
    return 0


def cmd_score(args) -> int:
    from . import backend, data

    transform, plda = backend.load_backend(args.backend)
    table = backend.EmbeddingTable.load(args.embeddings)
    trials = data.read_trials(args.trials)
    needed = sorted({t.enroll for t in trials} | {t.test for t in trials})
    projected = dict(zip(needed, backend.preprocess_apply(transform, table.select(needed))))
    if args.cosine:
        scores = [(t.enroll, t.test, float(projected[t.enroll] @ projected[t.test]))
                  for t in trials]
    else:
        scorer = backend.PldaScorer(plda)
        import numpy as np
        enroll = np.stack([projected[t.enroll] for t in trials])
        test = np.stack([projected[t.test] for t in trials])
        values = scorer.score_pairs(enroll, test)
        scores = [(t.enroll, t.test, float(v)) for t, v in zip(trials, values)]
    backend.write_scores(_out_path(args.out), scores)
    _log(f"scored {len(scores)} trials")
    return 0


def cmd_fuse(args) -> int:
    from . import backend

    lists = [backend.read_scores(path) for path in args.scores]
    fused = backend.fuse_scores(lists)
    backend.write_scores(_out_path(args.out), fused)
    _log(f"fused {len(lists)} systems over {len(fused)} trials")
    return 0


def cmd_evaluate(args) -> int:
    from . import backend, data, metrics
    from .serialize import atomic_write_text

    cfg = _load_run_config(args.config)
    trials = data.read_trials(args.trials)
    score_map = {(e, t): s for e, t, s in backend.read_scores(args.scores)}
    condition_of = data.read_key_value_file(args.utt2cond) if args.utt2cond else None
    report = metrics.build_report(trials, score_map, cfg.metrics, condition_of)
    text = metrics.format_report(report, title=f"scores: {os.path.basename(args.scores)}")
    print(text, end="")
    if args.out_prefix:
        prefix = _out_path(args.out_prefix)
        atomic_write_text(prefix + ".txt", text)
        atomic_write_text(prefix + ".json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_det_export(args) -> int:
    from . import backend, data, metrics
    from .serialize import atomic_write_text

    trials = data.read_trials(args.trials)
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    curves = []
    for path in args.scores:
        stem = os.path.splitext(os.path.basename(path))[0]
        score_map = {(e, t): s for e, t, s in backend.read_scores(path)}
        target, nontarget = [], []
        for trial in trials:
            key = (trial.enroll, trial.test)
            if key not in score_map:
                raise ValueError(f"no score for trial {trial.enroll} {trial.test} in {path}")
            (target if trial.target else nontarget).append(score_map[key])
        thresholds, p_fa, p_miss = metrics.det_points(target, nontarget)
        rows = ["threshold,p_fa,p_miss"]
        rows += [f"{t},{fa},{miss}" for t, fa, miss in zip(thresholds, p_fa, p_miss)]
        atomic_write_text(os.path.join(out_dir, f"det_{stem}.csv"), "\n".join(rows) + "\n")
        curves.append((stem, p_fa, p_miss))
    svg_path = os.path.join(out_dir, args.svg)
    atomic_write_text(svg_path, det_curve_svg(curves))
    _log(f"wrote {len(curves)} DET curve(s) to {out_dir}")
    return 0


def cmd_sweep_n(args) -> int:
    from .serialize import atomic_write_text

    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values or any(v < 1 for v in values):
        raise ValueError(f"--values must list positive pool sizes, got {args.values!r}")
    out_dir = _out_path(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for n in values:
        run_dir = os.path.join(out_dir, f"pool{n}")
        os.makedirs(run_dir, exist_ok=True)
        ckpt = os.path.join(run_dir, "acnn.ckpt")
        emb = os.path.join(run_dir, "embeddings.axvr")
        bke = os.path.join(run_dir, "backend.axvr")
        scores = os.path.join(run_dir, "scores.txt")
        _log(f"=== pool size {n} ===")
        base = ["--config", args.config] if args.config else []
        steps = [
            ["train", *base, "--corpus", args.corpus, "--arch", "acnn",
             "--pool-size", str(n), "--out", ckpt]
            + (["--seed", str(args.seed)] if args.seed is not None else []),
            ["extract", "--model", ckpt, "--corpus", args.corpus, "--out", emb],
            ["backend-fit", *base, "--embeddings", emb, "--corpus", args.corpus, "--out", bke],
            ["score", "--backend", bke, "--embeddings", emb,
             "--trials", os.path.join(args.corpus, "trials.txt"), "--out", scores],
        ]
        for step in steps:
            code = dispatch(step)
            if code != 0:
                return code
        from . import backend, data, metrics
        cfg = _load_run_config(args.config)
        trials = data.read_trials(os.path.join(args.corpus, "trials.txt"))
        score_map = {(e, t): s for e, t, s in backend.read_scores(scores)}
        report = metrics.build_report(trials, score_map, cfg.metrics)
        rows.append((n, report["overall"]))
    header = ["pool_size", "eer_pct"] + [k for k in rows[0][1] if k.startswith("min_dcf_p")] \
        + ["act_dcf"]
    lines = ["\t".join(header)]
    for n, overall in rows:
        cells = [str(n), f"{overall['eer'] * 100:.3f}"]
        cells += [f"{overall[k]:.4f}" for k in header[2:-1]]
        cells.append(f"{overall['act_dcf']:.4f}")
        lines.append("\t".join(cells))
    table = "\n".join(lines) + "\n"
    atomic_write_text(os.path.join(out_dir, "sweep.tsv"), table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# DET curve SVG (probit axes), written byte-deterministically
# ---------------------------------------------------------------------------

_DET_TICKS = (0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4)
_DET_RANGE = (0.001, 0.5)
_PALETTE = ("#1b6ca8", "#c23b22", "#2e8540", "#8a5fbf", "#b8860b", "#444444")


def det_curve_svg(curves, size: int = 520, margin: int = 60) -> str:
    """Overlay DET curves on probit-scaled axes; legend labels come from the
    score file stems."""
    probit = NormalDist().inv_cdf
    lo, hi = probit(_DET_RANGE[0]), probit(_DET_RANGE[1])
    span = hi - lo
    plot = size - 2 * margin

    def coord(p_fa: float, p_miss: float) -> tuple[float, float]:
        fa = min(max(p_fa, _DET_RANGE[0]), _DET_RANGE[1])
        miss = min(max(p_miss, _DET_RANGE[0]), _DET_RANGE[1])
        x = margin + (probit(fa) - lo) / span * plot
        y = size - margin - (probit(miss) - lo) / span * plot
        return x, y

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" '
        f'fill="none" stroke="#333333"/>',
    ]
    for tick in _DET_TICKS:
        x, _ = coord(tick, _DET_RANGE[0])
        _, y = coord(_DET_RANGE[0], tick)
        label = f"{tick * 100:g}"
        parts.append(f'<line x1="{x:.2f}" y1="{margin}" x2="{x:.2f}" y2="{size - margin}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<line x1="{margin}" y1="{y:.2f}" x2="{size - margin}" y2="{y:.2f}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{x:.2f}" y="{size - margin + 16}" font-size="10" '
                     f'text-anchor="middle">{label}</text>')
        parts.append(f'<text x="{margin - 6}" y="{y + 3:.2f}" font-size="10" '
                     f'text-anchor="end">{label}</text>')
    parts.append(f'<text x="{size / 2:.0f}" y="{size - 14}" font-size="12" '
                 f'text-anchor="middle">false alarm probability (%)</text>')
    parts.append(f'<text x="16" y="{size / 2:.0f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {size / 2:.0f})">miss probability (%)</text>')
    for i, (label, p_fa, p_miss) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in
                          (coord(fa, miss) for fa, miss in zip(p_fa, p_miss)))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = margin + 16 + 16 * i
        parts.append(f'<line x1="{size - margin - 130}" y1="{ly}" x2="{size - margin - 106}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{size - margin - 100}" y="{ly + 4}" font-size="11">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="axvector",
        description="Speaker verification pipeline: synthetic data, embedding "
                    "network training, scoring backend and evaluation.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (set before numeric modules load)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus and eval trials")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--seed", type=int, default=None, help="override the corpus seed")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train one embedding network variant")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--corpus", required=True, help="corpus directory from gen-data")
    p.add_argument("--arch", required=True, choices=sorted(ARCH_CHOICES),
                   help="network variant")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")
    p.add_argument("--pool-size", type=int, default=None,
                   help="override the adaptive filter pool size")
    p.add_argument("--log", default=None, help="training log path (default: <out>.log)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("extract", help="extract embeddings for a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", choices=("all", "train", "eval"), default="all")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("backend-fit", help="fit centering, projection and the scorer")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lda-dim", type=int, default=None)
    p.add_argument("--plda-iters", type=int, default=None)
    p.set_defaults(handler=cmd_backend_fit)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--backend", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cosine", action="store_true",
                   help="debug: cosine similarity instead of the generative scorer")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("fuse", help="equal-weight score fusion over systems")
    p.add_argument("--out", required=True)
    p.add_argument("scores", nargs="+", help="score files covering the same trials")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("evaluate", help="compute EER/DCF metrics from scores and trials")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--utt2cond", default=None, help="per-utterance condition map")
    p.add_argument("--out-prefix", default=None, help="write <prefix>.txt and <prefix>.json")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("det-export", help="export DET curve points (CSV) and an SVG overlay")
    p.add_argument("--trials", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--svg", default="det.svg", help="SVG filename inside --out-dir")
    p.add_argument("scores", nargs="+")
    p.set_defaults(handler=cmd_det_export)

    p = sub.add_parser("sweep-n", help="train the adaptive-conv variant over several "
                                       "pool sizes and tabulate the metrics")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--values", default="2,4,6,8", help="comma-separated pool sizes")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_sweep_n)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001 - single diagnostic line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
