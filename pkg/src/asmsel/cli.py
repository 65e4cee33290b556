"""
Staged command-line pipeline.

Every stage reads its inputs from and writes its outputs to one workspace
directory (``--out``)::

    features/   <utt>.asmf, index.tsv, meta.json
    asm/        inventory.asmc, initial.seq, meta.json
    hmm/        models.asmh, hmm.seq, trace.tsv, meta.json
    stop/<tokenizer>/   mp.stop idf.stop vp.stop sat.stop, meta.json
    select/<tag>/       segment store (manifest.tsv + segments/), meta.json
    eval/<tag>/         model.asml, report.txt, report.csv, meta.json

``<tag>`` is ``baseline`` or ``<tokenizer>-<metric>``.  Each ``meta.json``
records the fingerprint of the stage's own settings chained with those of
everything upstream; a stage refuses inputs whose recorded fingerprint does
not match what the current configuration would produce.

Exit codes: 0 success, 2 configuration or contract error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import store
from .asm_init import fit_inventory, tokenize_initial
from .classifier import evaluate, train_classifier
from .errors import AsmSelError, ContractError, FingerprintMismatch
from .features import extract_file
from .hmm import train_tokenizer, viterbi_decode
from .pipeline import PipelineConfig
from .selection import baseline_segments, select_utterance
from .stop import METRICS, StopAsmSet, collect_stats, score, select_stop_asms
from .synth import SynthSpec, generate_corpus, generate_waveforms

logger = logging.getLogger("asmsel")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 2, 3


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

class Manifest:
    """Tab-separated ``utterance_id  path  label  split`` rows.

    A ``#classes=a,b,c`` line declares the label set and its id order;
    without it the sorted set of labels seen is used.  Relative paths are
    resolved against the manifest's directory.
    """

    def __init__(self, rows, classes):
        self.rows = rows
        self.classes = list(classes)
        self.class_id = {c: i for i, c in enumerate(self.classes)}
        ids = [r[0] for r in rows]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ContractError(f"manifest: duplicate utterance id {dup}")
        for uid, _, label, split in rows:
            if label not in self.class_id:
                raise ContractError(f"manifest: {uid} has undeclared label {label!r}")
            if split not in ("train", "test"):
                raise ContractError(f"manifest: {uid} has split {split!r}, expected train/test")

    @classmethod
    def load(cls, path):
        path = Path(path)
        rows, classes = [], None
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("classes="):
                    classes = [c.strip() for c in line.split("=", 1)[1].split(",") if c.strip()]
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ContractError(f"{path}:{n}: expected 4 tab-separated fields, got {len(parts)}")
            uid, p, label, split = (x.strip() for x in parts)
            p = Path(p)
            rows.append((uid, p if p.is_absolute() else path.parent / p, label, split))
        if classes is None:
            classes = sorted({r[2] for r in rows})
        return cls(rows, classes)

    def text(self, base: Path | None = None) -> str:
        lines = ["#classes=" + ",".join(self.classes)]
        for uid, p, label, split in self.rows:
            rel = Path(p).relative_to(base) if base is not None else p
            lines.append(f"{uid}\t{rel}\t{label}\t{split}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# workspace helpers
# ---------------------------------------------------------------------------

def _hash(*parts) -> str:
    return hashlib.sha1(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def _write_meta(directory: Path, stage: str, fingerprint: str, **extra):
    meta = {"stage": stage, "fingerprint": fingerprint, **extra}
    store.write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _read_meta(directory: Path, stage: str) -> dict:
    path = directory / "meta.json"
    if not path.exists():
        raise ContractError(f"missing {stage} artifacts in {directory}; run `asmsel {stage}` first")
    return json.loads(path.read_text())


def _expect(directory: Path, stage: str, fingerprint: str) -> dict:
    meta = _read_meta(directory, stage)
    if meta["fingerprint"] != fingerprint:
        raise FingerprintMismatch(
            f"{directory}: {stage} artifacts were built with fingerprint {meta['fingerprint']}, "
            f"current configuration expects {fingerprint}; rerun `asmsel {stage}`")
    return meta


class Workspace:
    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg

    # fingerprints, each chained on its upstream
    def fp_features(self) -> str:
        return _read_meta(self.root / "features", "features")["fingerprint"]

    def fp_initial(self) -> str:
        return _hash("init-asm", self.fp_features(),
                     self.cfg.fingerprint("D", "n_segments", "seg_len", "kmeans_iters", "seed"))

    def fp_hmm(self) -> str:
        return _hash("train-tokenizer", self.fp_initial(),
                     self.cfg.fingerprint("n_states", "n_gauss", "em_iters", "hmm_iters", "stability", "seed"))

    def fp_sequences(self, tokenizer: str) -> str:
        return self.fp_initial() if tokenizer == "initial" else self.fp_hmm()

    def fp_stop(self, tokenizer: str) -> str:
        return _hash("detect-stop", self.fp_sequences(tokenizer), self.cfg.fingerprint("P", "idf_occurrences"))

    def fp_select(self, tag: str, tokenizer: str, metric: str | None) -> str:
        if metric is None:
            return _hash("select", tag, self.fp_features(), self.cfg.seg_len)
        return _hash("select", tag, self.fp_stop(tokenizer), metric, self.cfg.seg_len)

    # loaders
    def index(self):
        rows = []
        for line in (self.root / "features" / "index.tsv").read_text().splitlines():
            if line.strip():
                uid, label, split = line.split("\t")
                rows.append((uid, int(label), split))
        return rows

    def classes(self) -> list[str]:
        return _read_meta(self.root / "features", "features")["classes"]

    def frames(self, split: str | None = None):
        fp = self.fp_features()
        return [store.load_frames(self.root / "features" / f"{uid}.asmf", fp)
                for uid, _, s in self.index() if split is None or s == split]

    def sequences(self, tokenizer: str):
        if tokenizer == "initial":
            _expect(self.root / "asm", "init-asm", self.fp_initial())
            seqs = store.load_sequences(self.root / "asm" / "initial.seq")
        else:
            _expect(self.root / "hmm", "train-tokenizer", self.fp_hmm())
            seqs = store.load_sequences(self.root / "hmm" / "hmm.seq")
        by_id = {s.utterance_id: s for s in seqs}
        missing = [uid for uid, _, _ in self.index() if uid not in by_id]
        if missing:
            raise ContractError(f"{tokenizer} sequences lack utterance {missing[0]}")
        return by_id


def _tag(args) -> tuple[str, str | None]:
    if args.baseline:
        return "baseline", None
    return f"{args.tokenizer}-{args.metric.lower()}", args.metric.upper()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_features(args, cfg: PipelineConfig):
    if not args.manifest:
        raise ContractError("features needs --manifest")
    manifest = Manifest.load(args.manifest)
    ws = Workspace(args.out, cfg)
    feat_cfg = cfg.feature_config()
    out = ws.root / "features"
    digests, index = [], []
    for uid, path, label, split in manifest.rows:
        if path.suffix.lower() == ".wav":
            fm = store.quantize(extract_file(path, feat_cfg, cfg.sample_rate, uid))
        else:
            fm = store.load_frames(path)
            if fm.utterance_id != uid:
                raise ContractError(f"{path}: contains utterance {fm.utterance_id}, manifest says {uid}")
        blob = store.encode_frames(fm.frames, uid)
        store.write_bytes(out / f"{uid}.asmf", blob)
        digests.append(hashlib.sha1(blob).hexdigest())
        index.append(f"{uid}\t{manifest.class_id[label]}\t{split}\n")
    dims = {store.load_frames(out / f"{r[0]}.asmf").dim for r in manifest.rows}
    if len(dims) != 1:
        raise ContractError(f"utterances have mixed feature dimensions {sorted(dims)}")
    store.write_text(out / "index.tsv", "".join(index))
    fp = _hash("features", feat_cfg.fingerprint(), cfg.sample_rate, digests, manifest.classes)
    _write_meta(out, "features", fp, classes=manifest.classes, n_utterances=len(index), dim=dims.pop())
    print(f"features: {len(index)} utterances -> {out}")


def cmd_init_asm(args, cfg):
    ws = Workspace(args.out, cfg)
    train = ws.frames("train")
    if not train:
        raise ContractError("no training utterances in the feature store")
    inv = fit_inventory(train, cfg.D, cfg.seed, cfg.n_segments, cfg.seg_len, max_iters=cfg.kmeans_iters)
    seqs = [tokenize_initial(fm, inv, cfg.n_segments, cfg.seg_len) for fm in ws.frames()]
    out = ws.root / "asm"
    store.save_inventory(out / "inventory.asmc", inv)
    store.save_sequences(out / "initial.seq", seqs)
    _write_meta(out, "init-asm", ws.fp_initial(), kmeans_iterations=inv.n_iter,
                inertia=float(inv.inertia[-1]))
    print(f"init-asm: D={cfg.D}, {inv.n_iter} k-means iterations, {len(seqs)} sequences -> {out}")


def cmd_train_tokenizer(args, cfg):
    ws = Workspace(args.out, cfg)
    init = ws.sequences("initial")
    idx = ws.index()
    frames = {fm.utterance_id: fm for fm in ws.frames()}
    train_ids = [uid for uid, _, s in idx if s == "train"]
    models, train_seqs, trace = train_tokenizer(
        [frames[u] for u in train_ids], [init[u] for u in train_ids], cfg.D, cfg.n_states,
        cfg.n_gauss, cfg.hmm_iters, cfg.stability, cfg.em_iters, cfg.seed)
    decoded = dict(zip(train_ids, train_seqs))
    for uid, _, s in idx:
        if s != "train":
            decoded[uid] = viterbi_decode(frames[uid], models).sequence
    out = ws.root / "hmm"
    store.save_hmms(out / "models.asmh", models)
    store.save_sequences(out / "hmm.seq", [decoded[uid] for uid, _, _ in idx])
    rows = ["iteration\tobjective\tstability\n"]
    rows += [f"{i + 1}\t{float(o)!r}\t{float(s)!r}\n" for i, (o, s) in enumerate(zip(trace.objective, trace.stability))]
    store.write_text(out / "trace.tsv", "".join(rows))
    _write_meta(out, "train-tokenizer", ws.fp_hmm(), iterations=len(trace.objective),
                converged=trace.converged)
    print(f"train-tokenizer: {len(trace.objective)} iterations, converged={trace.converged} -> {out}")


def _ranking_table(stops: dict[str, StopAsmSet], rows: int = 10) -> str:
    lines = ["rank  " + "  ".join(f"{m:>16}" for m in stops)]
    rankings = {m: s.ranking() for m, s in stops.items()}
    for r in range(min(rows, len(next(iter(rankings.values()))))):
        cells = []
        for m, s in stops.items():
            j = rankings[m][r]
            cells.append(f"{'*' if j in s.selected else ' '}M{j:<3d} {s.scores[j]:>10.4g}")
        lines.append(f"{r + 1:>4}  " + "  ".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


def cmd_detect_stop(args, cfg):
    ws = Workspace(args.out, cfg)
    seqs = ws.sequences(args.tokenizer)
    train_ids = [uid for uid, _, s in ws.index() if s == "train"]
    stats = collect_stats([seqs[u] for u in train_ids], cfg.D)
    out = ws.root / "stop" / args.tokenizer
    stops = {}
    for metric in METRICS:
        kw = {"use_occurrences": cfg.idf_occurrences} if metric == "IDF" else {}
        stops[metric] = select_stop_asms(score(stats, metric, **kw), metric, cfg.P)
        store.save_stop_set(out / f"{metric.lower()}.stop", stops[metric])
    _write_meta(out, "detect-stop", ws.fp_stop(args.tokenizer), tokenizer=args.tokenizer)
    print(f"stop units from {args.tokenizer} sequences of {len(train_ids)} training utterances "
          f"(* = selected, P={cfg.P}):")
    print(_ranking_table(stops))
    print(f"selected ({cfg.metric}): {stops[cfg.metric].selected}")


def cmd_select(args, cfg):
    ws = Workspace(args.out, cfg)
    tag, metric = _tag(args)
    labels = {uid: lab for uid, lab, _ in ws.index()}
    frames = ws.frames()
    if metric is None:
        batches = []
        for fm in frames:
            b = baseline_segments(fm, cfg.seg_len)
            b.label = labels[fm.utterance_id]
            batches.append(b)
    else:
        stop_dir = ws.root / "stop" / args.tokenizer
        _expect(stop_dir, "detect-stop", ws.fp_stop(args.tokenizer))
        stop = store.load_stop_set(stop_dir / f"{metric.lower()}.stop")
        seqs = ws.sequences(args.tokenizer)
        batches = [select_utterance(fm, seqs[fm.utterance_id], stop.selected, cfg.seg_len,
                                    labels[fm.utterance_id]) for fm in frames]
    out = ws.root / "select" / tag
    store.save_segment_store(out, batches)
    n_fallback = sum(b.fallback for b in batches)
    _write_meta(out, "select", ws.fp_select(tag, args.tokenizer, metric),
                segments=int(sum(len(b) for b in batches)), fallbacks=n_fallback)
    print(f"select[{tag}]: {sum(len(b) for b in batches)} segments, {n_fallback} fallbacks -> {out}")


def cmd_train_eval(args, cfg):
    ws = Workspace(args.out, cfg)
    tag, metric = _tag(args)
    sel_dir = ws.root / "select" / tag
    sel_fp = ws.fp_select(tag, args.tokenizer, metric)
    _expect(sel_dir, "select", sel_fp)
    split = {uid: s for uid, _, s in ws.index()}
    batches = store.load_segment_store(sel_dir)
    train = [b for b in batches if split[b.utterance_id] == "train"]
    test = [b for b in batches if split[b.utterance_id] == "test"]
    if not train or not test:
        raise ContractError("train-eval needs non-empty train and test splits")
    classes = ws.classes()
    model = train_classifier(train, len(classes), cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size,
                             cfg.l2, classes)
    report = evaluate(test, model, classes=classes)
    out = ws.root / "eval" / tag
    store.save_classifier(out / "model.asml", model)
    store.write_text(out / "report.txt", report.to_text(f"[{tag}]"))
    store.write_text(out / "report.csv", report.to_csv())
    _write_meta(out, "train-eval", _hash("train-eval", sel_fp,
                cfg.fingerprint("epochs", "lr", "batch_size", "l2", "seed")), accuracy=report.accuracy)
    print(report.to_text(f"[{tag}]"), end="")


def _accuracy_from_csv(path: Path) -> float:
    last = path.read_text().strip().splitlines()[-1].split(",")
    return float(last[3])


def cmd_report(args, cfg):
    root = Path(args.out)
    results = {}
    for csv in sorted((root / "eval").glob("*/report.csv")):
        results[csv.parent.name] = _accuracy_from_csv(csv)
    if not results:
        raise ContractError(f"no evaluation reports under {root / 'eval'}")
    base = results.get("baseline")
    lines = [f"{'system':<20} {'accuracy':>9} {'delta':>8}"]
    csv_rows = ["system,accuracy,delta_vs_baseline"]
    for tag in sorted(results, key=lambda t: (t != "baseline", t)):
        acc = results[tag]
        has_delta = base is not None and tag != "baseline"
        delta = f"{100 * (acc - base):+.1f}" if has_delta else ""
        lines.append(f"{tag:<20} {100 * acc:>8.1f}% {delta:>8}")
        csv_rows.append(f"{tag},{acc:.6f}," + (f"{acc - base:.6f}" if has_delta else ""))
    store.write_text(root / "report.txt", "\n".join(lines) + "\n")
    store.write_text(root / "report.csv", "\n".join(csv_rows) + "\n")
    print("\n".join(lines))


def cmd_synth(args, cfg):
    spec = SynthSpec(
        n_classes=args.classes, n_event_units=args.events, n_filler_units=args.fillers,
        dim=args.dim, instance_spread=args.instance_spread, units_per_utterance=args.units,
        filler_rate=args.filler_rate, n_train=args.train, n_test=args.test, seed=cfg.seed)
    out = Path(args.out) / "synth"
    classes = [f"scene{c}" for c in range(spec.n_classes)]
    rows = []
    if args.waveform:
        import scipy.io.wavfile
        waves, labels, splits, truth = generate_waveforms(spec, cfg.sample_rate, cfg.hop_ms)
        for (uid, w), label, split in zip(waves, labels, splits):
            path = out / "audio" / f"{uid}.wav"
            with store.atomic_open(path, "wb") as fh:
                scipy.io.wavfile.write(fh, cfg.sample_rate, (w.samples[0] * 32767).astype("<i2"))
            rows.append((uid, path, classes[label], split))
    else:
        corpus = generate_corpus(spec)
        truth = corpus.truth
        for fm, label, split in zip(corpus.utterances, corpus.labels, corpus.splits):
            path = out / "features" / f"{fm.utterance_id}.asmf"
            store.save_frames(path, fm)
            rows.append((fm.utterance_id, path, classes[label], split))
    store.write_text(out / "manifest.tsv", Manifest(rows, classes).text(base=out))
    store.save_sequences(out / "truth.seq", truth)
    store.write_text(out / "fillers.txt", ",".join(map(str, spec.filler_ids)) + "\n")
    store.write_text(out / "spec.json", json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"synth: {len(rows)} utterances ({spec.n_train} train / {spec.n_test} test), "
          f"filler units {spec.filler_ids} -> {out / 'manifest.tsv'}")


def cmd_run(args, cfg):
    """All stages for the baseline and the configured tokenizer/metric."""
    cmd_features(args, cfg)
    cmd_init_asm(args, cfg)
    if args.tokenizer == "hmm":
        cmd_train_tokenizer(args, cfg)
    cmd_detect_stop(args, cfg)
    for baseline in (True, False):
        sub = argparse.Namespace(**{**vars(args), "baseline": baseline})
        cmd_select(sub, cfg)
        cmd_train_eval(sub, cfg)
    cmd_report(args, cfg)


COMMANDS = {
    "features": cmd_features,
    "init-asm": cmd_init_asm,
    "train-tokenizer": cmd_train_tokenizer,
    "detect-stop": cmd_detect_stop,
    "select": cmd_select,
    "train-eval": cmd_train_eval,
    "report": cmd_report,
    "synth": cmd_synth,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--manifest", help="utterance manifest (id, path, label, split)")
    common.add_argument("--out", required=True, help="workspace directory")
    common.add_argument("--metric", choices=[m.lower() for m in METRICS], type=str.lower)
    common.add_argument("--top-p", type=int, dest="top_p")
    common.add_argument("--tokenizer", choices=["initial", "hmm"])
    common.add_argument("--baseline", action="store_true", help="skip segment selection")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="asmsel", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or "").strip() or None)
        if name == "synth":
            p.add_argument("--classes", type=int, default=4)
            p.add_argument("--events", type=int, default=2, help="event units per class")
            p.add_argument("--fillers", type=int, default=3)
            p.add_argument("--dim", type=int, default=16)
            p.add_argument("--units", type=int, default=20, help="units per utterance")
            p.add_argument("--filler-rate", type=float, default=0.5)
            p.add_argument("--instance-spread", type=float, default=4.0)
            p.add_argument("--train", type=int, default=200)
            p.add_argument("--test", type=int, default=100)
            p.add_argument("--waveform", action="store_true", help="write WAV audio instead of features")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, seed=args.seed, P=args.top_p,
                                  metric=args.metric.upper() if args.metric else None,
                                  tokenizer=args.tokenizer)
        args.tokenizer = cfg.tokenizer
        args.metric = cfg.metric
        COMMANDS[args.command](args, cfg)
    except ContractError as exc:
        print(f"asmsel {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, AsmSelError) as exc:
        print(f"asmsel {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
