"""``refkv`` command line: data synthesis, dataset building, degradation,
training, restoration, evaluation and the mechanism benchmark.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error
(missing file, bad data, failed check).  Every command writes a manifest
with the seed, the effective configuration and the package version.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as config_mod, degrade, diffusion, evalbench, io, refdata, synthfaces, trainer
from ._accel import backend_name
from .jpeg import JpegError
from .tensorcore import Rng
from .tensorcore.rkvt import RkvtError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _run_manifest(command, cfg, seed, **extra) -> dict:
    out = {"command": command, "version": __version__, "seed": seed, "backend": backend_name()}
    out.update(extra)
    out.update({f"config.{k}": config_mod._fmt(v) for k, v in cfg.items()})
    return out


def _overrides(args, mapping) -> dict:
    """Dotted-key overrides from ``--set`` pairs plus dedicated flags (flags win)."""
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _config(args, mapping) -> dict:
    try:
        return config_mod.load(getattr(args, "config", None), _overrides(args, mapping))
    except config_mod.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_synth_data(args):
    cfg = _config(args, {"seed": "seed"})
    t0 = time.perf_counter()
    man = synthfaces.generate_corpus(args.out, args.identities, args.renders, cfg["seed"],
                                     synthfaces.default_embedder(cfg["embedder.seed"]))
    man.update(_run_manifest("synth-data", cfg, cfg["seed"], seconds=f"{time.perf_counter() - t0:.2f}"))
    io.write_manifest(Path(args.out) / "manifest.txt", man)
    _log(f"wrote {man['images']} images of {args.identities} identities to {args.out}")
    _log(f"intra link {man['margin_link']}  inter gap {man['margin_cross']}  threshold {man['calibrated_threshold']}")
    return 0


def build_dataset_dir(corpus, out, cfg, exclude=(), embeddings=None, ids=None) -> dict:
    """Embeddings and ids default to the corpus files; ``corpus`` may be None when both are given."""
    out = Path(out)
    corpus = Path(corpus) if corpus is not None else None
    if corpus is None and (embeddings is None or ids is None):
        raise UsageError("build-dataset needs --corpus, or both --embeddings and --ids")
    emb = refdata.EmbeddingSet.load(embeddings or corpus / "embeddings.rkvt", ids or corpus / "ids.txt")
    ds = refdata.build_dataset(emb, cfg["data.threshold"], cfg["data.min_test_dist"], config_mod.ratios(cfg),
                               Rng([cfg["seed"], 0xD5]), exclude)
    out.mkdir(parents=True, exist_ok=True)
    for split in refdata.SPLITS:
        refdata.write_reflists(out / f"{split}_refs.tsv",
                               {t: ds.reflists[t] for t in ds.targets(split)})
    refdata.write_splits(out / "splits.tsv", ds.split.image_split)
    comps = ds.graph.components()
    (out / "components.tsv").write_text(
        "".join(f"{emb.ids[i]}\t{ds.graph.labels[i]}\n" for i in range(len(emb.ids))), encoding="utf-8")
    test_d = [d for t in ds.targets("test") for d in ds.reflists[t].distances]
    stats = {
        "images": len(emb.ids),
        "components": len(comps),
        "singletons": len(ds.split.excluded),
        "edges": len(ds.graph.edges),
        **{f"{s}_targets": len(ds.targets(s)) for s in refdata.SPLITS},
        "test_pair_min": f"{min(test_d):.6f}" if test_d else "nan",
        "test_pair_max": f"{max(test_d):.6f}" if test_d else "nan",
    }
    labels_path = corpus / "labels.tsv" if corpus is not None else None
    if labels_path is not None and labels_path.exists():
        truth = {}
        for name, lab in synthfaces.load_labels(labels_path).items():
            truth.setdefault(lab, set()).add(name)
        found = {frozenset(emb.ids[i] for i in m) for m in comps.values()}
        stats["partition_matches_labels"] = int(found == {frozenset(v) for v in truth.values()})
    io.write_manifest(out / "manifest.txt", {**_run_manifest("build-dataset", cfg, cfg["seed"]),
                                             "corpus": str(corpus or ""), "embeddings": str(embeddings or ""), **stats})
    return stats


def cmd_build_dataset(args):
    cfg = _config(args, {"seed": "seed", "threshold": "data.threshold", "min_test_dist": "data.min_test_dist",
                         "ratios": "data.ratios"})
    exclude = []
    if args.exclude:
        path = Path(args.exclude)
        if not path.exists():
            raise FileNotFoundError(f"exclusion list {path} not found")
        exclude = [x.strip() for x in path.read_text(encoding="utf-8").splitlines() if x.strip()]
    stats = build_dataset_dir(args.corpus, args.out, cfg, exclude, args.embeddings, args.ids)
    _log(" ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def degrade_split(corpus, dataset, out, split, preset, cfg) -> list:
    corpus, out = Path(corpus), Path(out)
    targets = sorted(refdata.read_reflists(Path(dataset) / f"{split}_refs.tsv"))
    if not targets:
        raise RuntimeError(f"split {split!r} has no targets in {dataset}")
    images = trainer.load_images(corpus, targets)
    (out / "lq").mkdir(parents=True, exist_ok=True)
    rng = Rng([cfg["seed"], 0xDE])
    rows = ["id\tsigma\tr\tdelta\tq"]
    for i, t in enumerate(targets):
        params = degrade.sample_params(preset, rng.child(i, 0))
        lq = degrade.degrade(images[t], params, rng.child(i, 1), cfg["degrade.subsampling"])
        io.write_ppm(out / "lq" / f"{t}.ppm", lq)
        rows.append(f"{t}\t{params.sigma:.6f}\t{params.r:.6f}\t{params.delta:.6f}\t{params.q}")
    (out / "params.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    io.write_manifest(out / "manifest.txt", {**_run_manifest("degrade", cfg, cfg["seed"]), "split": split,
                                             "preset": preset, "images": len(targets), "corpus": str(corpus)})
    return targets


def cmd_degrade(args):
    cfg = _config(args, {"seed": "seed", "subsampling": "degrade.subsampling"})
    if args.input:
        if not args.output:
            raise UsageError("degrade --input needs --output")
        explicit = [args.sigma, args.r, args.delta, args.q]
        if all(v is not None for v in explicit):
            params = degrade.DegradationParams(args.sigma, args.r, args.delta, args.q)
        elif any(v is not None for v in explicit):
            raise UsageError("give all of --sigma --r --delta --q, or none of them")
        else:
            params = degrade.sample_params(args.preset, Rng([cfg["seed"], 0xDE]).child(0, 0))
        img = io.read_ppm(args.input)
        out = degrade.degrade(img, params, Rng([cfg["seed"], 0xDE]).child(0, 1), cfg["degrade.subsampling"])
        io.write_ppm(args.output, out)
        io.write_manifest(str(args.output) + ".manifest.txt",
                          {**_run_manifest("degrade", cfg, cfg["seed"]), "input": args.input, **params.as_dict()})
        _log(f"wrote {args.output} ({params})")
        return 0
    if not (args.corpus and args.dataset and args.out):
        raise UsageError("degrade needs --input/--output, or --corpus, --dataset and --out")
    targets = degrade_split(args.corpus, args.dataset, args.out, args.split, args.preset, cfg)
    _log(f"degraded {len(targets)} {args.split} images with the {args.preset} preset into {args.out}")
    return 0


TRAIN_FLAGS = {"seed": "seed", "mechanism": "model.mechanism", "steps": "train.steps", "lr": "train.lr",
               "batch_size": "train.batch_size", "lambda_time_id": "loss.lambda_time_id",
               "scaling_mode": "loss.scaling_mode", "dropout": "train.condition_dropout_prob"}


def cmd_train(args):
    out = Path(args.out)
    data = trainer.TrainingSet.from_dirs(args.corpus, args.dataset, "train")
    if args.resume:
        if not (out / "manifest.txt").exists():
            raise FileNotFoundError(f"no checkpoint to resume in {out}")
        over = _overrides(args, {"steps": "train.steps"})
        tr = trainer.Trainer.load(out, data, overrides=over)
        _log(f"resumed {out} at step {tr.step_count}")
    else:
        cfg = _config(args, TRAIN_FLAGS)
        tr = trainer.Trainer(cfg, data)
    cfg = tr.cfg
    steps = cfg["train.steps"]
    t0 = time.perf_counter()
    rows = tr.run(steps, log=lambda p: _log(f"step {p['step']}  ldm {p['ldm']:.5f}  time_id {p['time_id']:.5f}"
                                               f"  total {p['total']:.5f}"), checkpoint_dir=out)
    elapsed = time.perf_counter() - t0
    if rows:
        mode = "a" if args.resume and (out / "losses.tsv").exists() else "w"
        with open(out / "losses.tsv", mode, encoding="utf-8") as fh:
            if mode == "w":
                fh.write("step\tldm\ttime_id\ttotal\tt_mean\tdropped\n")
            for r in rows:
                fh.write(f"{r['step']}\t{r['ldm']:.8f}\t{r['time_id']:.8f}\t{r['total']:.8f}\t{r['t_mean']:.1f}"
                         f"\t{r['dropped']}\n")
    man = io.read_manifest(out / "manifest.txt")
    man.update({"command": "train", "seconds": f"{elapsed:.2f}", "train_targets": len(data),
                **{f"counters.{k}": v for k, v in tr.model.counters.as_dict().items()}})
    io.write_manifest(out / "manifest.txt", man)
    _log(f"trained to step {tr.step_count} in {elapsed:.1f}s; checkpoint in {out}")
    return 0


def _load_model(path, steps=None, guidance_scale=None):
    tr = trainer.Trainer.load(path)
    if steps is not None:
        tr.cfg["steps"] = steps
    if guidance_scale is not None:
        tr.cfg["guidance_scale"] = guidance_scale
    return tr


def _guidance(scale):
    return None if scale is None else diffusion.GuidanceConfig(scale)


def cmd_restore(args):
    tr = _load_model(args.model, args.steps, args.guidance)
    cfg = tr.cfg
    seed = cfg["seed"] if args.seed is None else args.seed
    steps, scale = cfg["steps"], cfg["guidance_scale"]
    tr.model.counters.reset()
    if args.lq:
        if not args.out:
            raise UsageError("restore --lq needs --out")
        lq = io.read_ppm(args.lq)[None]
        refs = None
        if args.refs:
            refs = np.stack([io.read_ppm(p) for p in args.refs.split(",") if p])[None]
        img, _ = trainer.restore(tr.model, tr.codec, lq, refs, steps, _guidance(scale), tr.sched, seed,
                                 slots=cfg["n_refs"])
        io.write_ppm(args.out, img[0])
        io.write_manifest(str(args.out) + ".manifest.txt", {
            **_run_manifest("restore", cfg, seed), "model": args.model, "lq": args.lq, "refs": args.refs or "",
            **{f"counters.{k}": v for k, v in tr.model.counters.as_dict().items()}})
        _log(f"wrote {args.out}")
        return 0
    if not (args.lq_dir and args.corpus and args.dataset and args.out):
        raise UsageError("restore needs --lq/--out, or --lq-dir, --corpus, --dataset and --out")
    out = Path(args.out)
    lists = refdata.read_reflists(Path(args.dataset) / f"{args.split}_refs.tsv")
    targets = sorted(lists)
    lq = np.stack([_read_required(Path(args.lq_dir) / "lq" / f"{t}.ppm") for t in targets])
    n_refs = cfg["n_refs"] if args.n_refs is None else args.n_refs
    refs = None
    if n_refs > 0:
        images = trainer.load_images(args.corpus, sorted({r for t in targets for r in lists[t]}))
        refs = np.stack([np.stack([images[r] for r in _cycle(lists[t], n_refs)]) for t in targets])
    img, _ = trainer.restore(tr.model, tr.codec, lq, refs, steps, _guidance(scale), tr.sched, seed,
                             slots=cfg["n_refs"])
    (out / "restored").mkdir(parents=True, exist_ok=True)
    for t, x in zip(targets, img):
        io.write_ppm(out / "restored" / f"{t}.ppm", x)
    io.write_manifest(out / "manifest.txt", {
        **_run_manifest("restore", cfg, seed), "model": args.model, "split": args.split, "n_refs": n_refs,
        "images": len(targets), **{f"counters.{k}": v for k, v in tr.model.counters.as_dict().items()}})
    _log(f"restored {len(targets)} images with {n_refs} references into {out}")
    return 0


def _cycle(items, n):
    """First ``n`` entries of ``items`` repeated as needed (FPS order is kept)."""
    if not items:
        raise RuntimeError("target has no references")
    return [items[i % len(items)] for i in range(n)]


def _read_required(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"image {path} not found")
    return io.read_ppm(path)


def evaluate_dir(restored_dir, corpus, embedder) -> tuple:
    folder = Path(restored_dir) / "restored"
    names = sorted(p.stem for p in folder.glob("*.ppm"))
    if not names:
        raise RuntimeError(f"no restored images in {folder}")
    restored = np.stack([io.read_ppm(folder / f"{n}.ppm") for n in names])
    hq = np.stack(list(trainer.load_images(corpus, names).values()))
    report = evalbench.evaluate(restored, hq, names, embedder)
    fid = float("nan")
    if len(names) >= 2:
        from .tensorcore import Tensor, no_grad

        with no_grad():
            fa = embedder.features(Tensor(restored * 2 - 1)).data
            fb = embedder.features(Tensor(hq * 2 - 1)).data
        fid = evalbench.fid(fa, fb)
    return report, fid


def cmd_eval(args):
    cfg = _config(args, {"seed": "seed"})
    report, fid = evaluate_dir(args.restored, args.corpus, synthfaces.default_embedder(cfg["embedder.seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    summary = report.summary() + f"\nfid = {fid:.6f} (embedder features, {len(report.rows)} images)\n"
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    agg = report.aggregates()
    io.write_manifest(out / "manifest.txt", {**_run_manifest("eval", cfg, cfg["seed"]), "restored": args.restored,
                                             **{f"mean_{k}": f"{m:.6f}" for k, (m, _) in agg.items()},
                                             "fid": f"{fid:.6f}"})
    _log(summary.rstrip())
    return 0


def cmd_bench(args):
    cfg = _config(args, {"seed": "seed", "steps": "steps"})
    unet = config_mod.unet_config(cfg)
    mechs = tuple(args.mechanisms.split(",")) if args.mechanisms else None
    kwargs = {"mechanisms": mechs} if mechs else {}
    report = evalbench.bench_mechanisms(unet, cfg["steps"], args.refs, cfg["seed"], repeats=args.repeats,
                                        schedule=config_mod.schedule(cfg), guidance_scale=cfg["guidance_scale"],
                                        **kwargs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8")
    io.write_manifest(out / "manifest.txt", {**_run_manifest("bench", cfg, cfg["seed"]), "n_refs": args.refs,
                                             "repeats": args.repeats,
                                             "law_ok": int(all(r["law_ok"] for r in report.rows))})
    _log(report.summary().rstrip())
    if not all(r["law_ok"] for r in report.rows):
        raise RuntimeError("pass-count law violated")
    return 0


SMOKE_SETTINGS = {"train.steps": 20, "train.batch_size": 4, "steps": 10, "train.checkpoint_every": 0,
                  "train.log_every": 10, "data.ratios": "0.8,0.1,0.1"}


def end_to_end_smoke(out, seed=0, identities=12, renders=6, overrides=None) -> dict:
    """synth-data -> build-dataset -> degrade -> train -> restore -> eval under one seed."""
    out = Path(out)
    cfg = config_mod.load(None, {**SMOKE_SETTINGS, "seed": seed, **(overrides or {})})
    checks = {}
    embedder = synthfaces.default_embedder(cfg["embedder.seed"])
    corpus = synthfaces.generate_corpus(out / "corpus", identities, renders, seed, embedder)
    checks["corpus_images"] = int(corpus["images"]) == identities * renders
    stats = build_dataset_dir(out / "corpus", out / "dataset", cfg)
    checks["partition_exact"] = bool(stats.get("partition_matches_labels"))
    checks["test_pairs_in_range"] = stats["test_targets"] == 0 or (
        float(stats["test_pair_min"]) >= cfg["data.min_test_dist"]
        and float(stats["test_pair_max"]) < cfg["data.threshold"])
    degrade_split(out / "corpus", out / "dataset", out / "degraded", "test", "severe", cfg)
    data = trainer.TrainingSet.from_dirs(out / "corpus", out / "dataset", "train")
    tr = trainer.Trainer(cfg, data, embedder=embedder)
    rows = tr.run(cfg["train.steps"], checkpoint_dir=out / "model")
    checks["losses_finite"] = all(np.isfinite(r["total"]) for r in rows)
    lists = refdata.read_reflists(out / "dataset" / "test_refs.tsv")
    targets = sorted(lists)
    lq = np.stack([io.read_ppm(out / "degraded" / "lq" / f"{t}.ppm") for t in targets])
    images = trainer.load_images(out / "corpus", sorted({r for t in targets for r in lists[t]} | set(targets)))
    refs = np.stack([np.stack([images[r] for r in _cycle(lists[t], cfg["n_refs"])]) for t in targets])
    tr.model.counters.reset()
    restored, _ = trainer.restore(tr.model, tr.codec, lq, refs, cfg["steps"], config_mod.guidance(cfg), tr.sched,
                                  seed, batch=len(targets))
    c = tr.model.counters.as_dict()
    checks["pass_law"] = c["unet_passes"] == evalbench.expected_passes(
        cfg["model.mechanism"], cfg["steps"], cfg["n_refs"], batch=len(targets))
    (out / "restored" / "restored").mkdir(parents=True, exist_ok=True)
    for t, x in zip(targets, restored):
        io.write_ppm(out / "restored" / "restored" / f"{t}.ppm", x)
    report, fid = evaluate_dir(out / "restored", out / "corpus", embedder)
    (out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    checks["fid_finite"] = bool(np.isfinite(fid))
    result = {"checks": checks, "ok": all(checks.values()), "metrics": report.to_tsv(), "fid": fid}
    io.write_manifest(out / "manifest.txt", {**_run_manifest("smoke", cfg, seed), "identities": identities,
                                             "renders": renders, "fid": f"{fid:.6f}",
                                             **{f"check.{k}": int(v) for k, v in checks.items()}})
    return result


def cmd_smoke(args):
    res = end_to_end_smoke(args.out, args.seed, args.identities, args.renders)
    for k, v in res["checks"].items():
        _log(f"{'PASS' if v else 'FAIL'}  {k}")
    _log(f"fid {res['fid']:.4f}")
    if not res["ok"]:
        raise RuntimeError("smoke run failed a self-check")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refkv", description="Reference-conditioned latent diffusion restoration toolkit.")
    p.add_argument("--version", action="version", version=f"refkv {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        sp.add_argument("--config", help="text config file ([section] / key = value)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth-data", help="render a synthetic identity corpus")
    sp.add_argument("--identities", type=int, default=50)
    sp.add_argument("--renders", type=int, default=10)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("build-dataset", help="identity graph, splits and reference lists")
    sp.add_argument("--corpus", help="output directory of 'refkv synth-data'")
    sp.add_argument("--embeddings", help="RKVT embedding matrix (default: <corpus>/embeddings.rkvt)")
    sp.add_argument("--ids", help="id list, one per row (default: <corpus>/ids.txt)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--min-test-dist", type=float)
    sp.add_argument("--ratios")
    sp.add_argument("--exclude", help="file with one image id per line to leave out")
    common(sp)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("degrade", help="synthesize low-quality inputs")
    sp.add_argument("--input")
    sp.add_argument("--output")
    sp.add_argument("--corpus")
    sp.add_argument("--dataset")
    sp.add_argument("--out")
    sp.add_argument("--split", default="test", choices=refdata.SPLITS)
    sp.add_argument("--preset", default="severe", choices=sorted(degrade.PRESETS))
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--r", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--q", type=int)
    sp.add_argument("--subsampling", choices=("4:4:4", "4:2:0"))
    common(sp)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("train", help="train a restoration model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--mechanism", choices=("channel-concat", "cross-attention", "spatial-concat", "cachekv"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--lambda-time-id", type=float)
    sp.add_argument("--scaling-mode")
    sp.add_argument("--dropout", type=float, help="reference dropout probability")
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("restore", help="restore LQ images with a trained model")
    sp.add_argument("--model", required=True, help="checkpoint directory")
    sp.add_argument("--lq", help="single LQ PPM")
    sp.add_argument("--refs", help="comma-separated reference PPMs")
    sp.add_argument("--lq-dir", help="output directory of 'refkv degrade'")
    sp.add_argument("--corpus")
    sp.add_argument("--dataset")
    sp.add_argument("--split", default="test", choices=refdata.SPLITS)
    sp.add_argument("--n-refs", type=int)
    sp.add_argument("--out")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--guidance", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("eval", help="IDS, PSNR and FID of restored images")
    sp.add_argument("--restored", required=True, help="output directory of 'refkv restore'")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time and count the four conditioning mechanisms")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--refs", type=int, default=5)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--mechanisms", help="comma-separated subset")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("smoke", help="run the whole pipeline at toy size")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--identities", type=int, default=12)
    sp.add_argument("--renders", type=int, default=6)
    sp.set_defaults(func=cmd_smoke)
    return p


RUNTIME_ERRORS = (FileNotFoundError, OSError, ValueError, KeyError, RuntimeError, JpegError, RkvtError,
                  json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
