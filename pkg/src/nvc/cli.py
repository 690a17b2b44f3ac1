"""Command-line entry point.

Progress and results go to stdout as one JSON object per line; human-readable
summaries go to stderr. Exit status: 0 success, 1 usage or config error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus, fileio, metrics
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError
from .nn import AdamState, CheckpointError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def emit(**fields):
    print(json.dumps(fields, ensure_ascii=False), flush=True)


def say(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- workdir layout ------------------------------------------------------------------

def encoder_mel_dir(cfg: RunConfig) -> Path:
    return cfg.workdir / "encoder_mels"


def synth_dir(cfg: RunConfig) -> Path:
    return cfg.workdir / "synth"


def vocoder_dir(cfg: RunConfig) -> Path:
    return cfg.workdir / "vocoder"


def checkpoint_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.workdir / "checkpoints" / f"{kind}.nvc"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; {hint}")
    return path


def encoder_split(cfg: RunConfig, mels_by_speaker: dict):
    """(train, enroll, trials): the first ``train_utts`` utterances per speaker train the
    encoder, the last ``enroll_utts`` of those enroll, everything after is a trial."""
    n_train, n_enroll = cfg["encoder"]["train_utts"], cfg["encoder"]["enroll_utts"]
    train = {s: [m for _, m in v[:n_train]] for s, v in mels_by_speaker.items()}
    enroll = {s: [m for _, m in v[max(0, n_train - n_enroll):n_train]] for s, v in mels_by_speaker.items()}
    trials = {s: [m for _, m in v[n_train:]] for s, v in mels_by_speaker.items()}
    return train, enroll, {s: v for s, v in trials.items() if v}


# -- commands -------------------------------------------------------------------------

def cmd_toy_corpus(cfg: RunConfig, args) -> int:
    n_spk, n_utt = cfg["toy"]["speakers"], cfg["toy"]["utterances"]
    corpus.synth_toy_corpus(cfg.seed, n_spk, n_utt, cfg.corpus)
    man = corpus.scan_corpus(cfg.corpus)
    spk, utts, hours = man.totals
    emit(event="toy-corpus", path=str(cfg.corpus), speakers=spk, utterances=utts, hours=hours)
    say(f"wrote {utts} utterances from {spk} speakers to {cfg.corpus}")
    return EXIT_OK


def _synth_subset(cfg: RunConfig, man: corpus.CorpusManifest) -> corpus.CorpusManifest:
    n_spk, n_utt = cfg["synth"]["speakers"], cfg["synth"]["utts_per_speaker"]
    by_spk = man.by_speaker
    speakers = sorted(by_spk)[:n_spk] if n_spk > 0 else sorted(by_spk)
    records = []
    for s in speakers:
        utts = sorted(by_spk[s], key=lambda r: r.utt_id)
        records.extend(utts[:n_utt] if n_utt > 0 else utts)
    return corpus.CorpusManifest(records)


def cmd_preprocess(cfg: RunConfig, args) -> int:
    if args.stage == "vocoder":
        from .synthesizer import gta_mels, load_examples

        model, _, _ = load_checkpoint(_require(checkpoint_path(cfg, "synthesizer"), "run `train synth`"),
                                      expected_kind="synthesizer")
        manifest = _require(synth_dir(cfg) / "train.txt", "run `preprocess synth`")
        rows = corpus.read_train_manifest(manifest)
        examples = load_examples(manifest)
        wavs = {ex.utt_id: row.audio for ex, row in zip(examples, rows)}
        out = gta_mels(model, examples, vocoder_dir(cfg), wavs)
        emit(event="preprocess", stage="vocoder", written=len(examples), manifest=str(out))
        return EXIT_OK
    man = corpus.scan_corpus(cfg.corpus)
    for utt, why in sorted(man.skipped.items()):
        say(f"skipped {utt}: {why}")
    if args.stage == "encoder":
        rep = corpus.preprocess_encoder(man, encoder_mel_dir(cfg))
        out = encoder_mel_dir(cfg) / "index.tsv"
    else:
        enc, _, _ = load_checkpoint(_require(checkpoint_path(cfg, "encoder"), "run `train encoder`"),
                                    expected_kind="encoder")
        rep = corpus.preprocess_synthesizer(_synth_subset(cfg, man), enc, synth_dir(cfg))
        out = synth_dir(cfg) / "train.txt"
    for utt, err in sorted(rep.errors.items()):
        say(f"error {utt}: {err}")
    emit(event="preprocess", stage=args.stage, written=rep.written, errors=len(rep.errors),
         skipped=len(man.skipped), manifest=str(out))
    return EXIT_OK


def _start_model(cfg, args, kind, build):
    """Fresh model or one resumed from --resume; returns (model, adam, step)."""
    section = {"encoder": "encoder", "synthesizer": "synth", "vocoder": "vocoder"}[kind]
    patterns = cfg.freeze_patterns(section) + list(args.freeze or [])
    if args.resume:
        model, step, adam = load_checkpoint(args.resume, expected_kind=kind, freeze_patterns=patterns)
        say(f"resumed {kind} from {args.resume} at step {step}")
    else:
        model, step, adam = build(), 0, None
        model.freeze(patterns)
    frozen = sorted(n for n, p in model.params.items() if p.frozen)
    if frozen:
        say(f"frozen: {', '.join(frozen)}")
    return model, adam, step


def _finish(cfg, args, kind, result):
    out = Path(args.out) if args.out else checkpoint_path(cfg, kind)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out, result.step, result.adam)
    emit(event="checkpoint", kind=kind, path=str(out), step=result.step, sha256=_sha256(out))
    say(f"saved {kind} checkpoint at step {result.step} to {out}")


def _logger(cfg, every=10):
    def log(step, loss, **extra):
        if step % every == 0:
            emit(step=step, loss=loss, **extra)
    return log


def cmd_train(cfg: RunConfig, args) -> int:
    log = _logger(cfg)
    if args.model == "encoder":
        from .encoder import EncoderModel, EncoderTrainConfig, train_encoder

        c = cfg["encoder"]
        mels = corpus.load_encoder_index(_require(encoder_mel_dir(cfg), "run `preprocess encoder`"))
        train, _, _ = encoder_split(cfg, mels)
        model, adam, step = _start_model(cfg, args, "encoder", lambda: EncoderModel({
            "hidden": c["hidden"], "layers": c["layers"], "embed_dim": c["embed_dim"],
            "partial_frames": c["partial_frames"], "seed": cfg.seed}))
        hp = EncoderTrainConfig(c["speakers_per_batch"], c["utterances_per_speaker"], c["steps"], c["lr"],
                                seed=cfg.seed)
        res = train_encoder(train, hp, model, adam or AdamState(lr=c["lr"]), step,
                            callback=lambda s, loss: log(s, loss))
        _finish(cfg, args, "encoder", res)
    elif args.model == "synth":
        from .synthesizer import SynthModel, SynthTrainConfig, load_examples, train_synthesizer

        c = cfg["synth"]
        examples = load_examples(_require(synth_dir(cfg) / "train.txt", "run `preprocess synth`"))
        if not examples:
            raise CorpusError("train.txt lists no utterances")
        arch = {k: c[k] for k in ("embed_dim", "enc_hidden", "attn_dim", "prenet", "prenet_dropout",
                                  "att_rnn", "dec_rnn", "reduction")}
        arch.update(seed=cfg.seed, spk_dim=len(examples[0].spk), n_mels=examples[0].mel.shape[1])
        model, adam, step = _start_model(cfg, args, "synthesizer", lambda: SynthModel(arch))
        hp = SynthTrainConfig(c["steps"], c["batch_size"], c["lr"], seed=cfg.seed,
                              guide_weight=c["guide_weight"], guide_sigma=c["guide_sigma"])
        res = train_synthesizer(examples, hp, model, adam or AdamState(lr=c["lr"]), step,
                                callback=lambda s, r: log(s, r.total, mae=r.mae, mse=r.mse))
        _finish(cfg, args, "synthesizer", res)
    else:
        from .vocoder import VocoderModel, VocoderTrainConfig, train_vocoder

        c = cfg["vocoder"]
        pairs = read_vocoder_manifest(_require(vocoder_dir(cfg) / "vocoder.txt", "run `preprocess vocoder`"))
        if c["clips"] > 0:
            pairs = pairs[:c["clips"]]
        if not pairs:
            raise CorpusError("vocoder.txt lists no clips")
        model, adam, step = _start_model(cfg, args, "vocoder", lambda: VocoderModel({
            "channels": c["channels"], "hidden": c["hidden"], "n_mels": pairs[0].mel.shape[1],
            "seed": cfg.seed}))
        hp = VocoderTrainConfig(c["steps"], c["segment"], c["lr"], seed=cfg.seed)
        res = train_vocoder(pairs, hp, model, adam or AdamState(lr=c["lr"]), step,
                            callback=lambda s, loss: log(s, loss))
        _finish(cfg, args, "vocoder", res)
    return EXIT_OK


def read_vocoder_manifest(path) -> list:
    from .vocoder import GtaPair

    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split("|")
        if len(parts) != 3 or not parts[2]:
            raise CorpusError(f"bad vocoder manifest line: {line!r}")
        pairs.append(GtaPair(fileio.read_mel(parts[1]), fileio.read_wav(parts[2]), parts[0]))
    return pairs


def cmd_clone(cfg: RunConfig, args) -> int:
    from .pipeline import clone

    enc, _, _ = load_checkpoint(args.encoder or _require(checkpoint_path(cfg, "encoder"), "run `train encoder`"),
                                expected_kind="encoder")
    syn, _, _ = load_checkpoint(args.synthesizer or _require(checkpoint_path(cfg, "synthesizer"),
                                                             "run `train synth`"), expected_kind="synthesizer")
    voc = None
    if args.vocoder == "neural":
        voc, _, _ = load_checkpoint(args.vocoder_checkpoint or _require(checkpoint_path(cfg, "vocoder"),
                                                                        "run `train vocoder`"),
                                    expected_kind="vocoder")
    ref = fileio.read_wav(args.ref)
    c = cfg["clone"]
    res = clone(enc, syn, args.text, ref, args.vocoder, voc, c["max_frames"], c["stop_threshold"],
                cfg["dsp"]["griffin_lim_iterations"], cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_wav(out, res.wav)
    emit(event="clone", out=str(out), samples=len(res.wav), frames=len(res.mel), stopped=res.stopped,
         vocoder=args.vocoder)
    say(f"wrote {len(res.wav) / fileio.SAMPLE_RATE:.2f} s to {out}")
    return EXIT_OK


def _read_scores(path) -> np.ndarray:
    try:
        return np.array([float(t) for t in Path(path).read_text(encoding="utf-8").split()])
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.metric == "eer":
        from .encoder import equal_error_rate, verification_scores

        if bool(args.genuine) != bool(args.impostor):
            raise UsageError("--genuine and --impostor go together")
        if args.genuine:
            genuine, impostor = _read_scores(args.genuine), _read_scores(args.impostor)
        else:
            enc, _, _ = load_checkpoint(_require(checkpoint_path(cfg, "encoder"), "run `train encoder`"),
                                        expected_kind="encoder")
            _, enroll, trials = encoder_split(cfg, corpus.load_encoder_index(encoder_mel_dir(cfg)))
            if not trials:
                raise CorpusError("no held-out trial utterances; lower encoder.train_utts")
            genuine, impostor = verification_scores(enc, enroll, trials)
        eer, thr = equal_error_rate(genuine, impostor)
        print(f"EER {eer:.4f}", flush=True)
        say(f"threshold {thr:.6f}, {len(genuine)} genuine / {len(impostor)} impostor trials")
    elif args.metric == "mos":
        if not args.sheet:
            raise UsageError("eval mos needs --sheet")
        cleaned = metrics.clean_mos(metrics.read_mos_csv(args.sheet))
        rep = metrics.mos_report(cleaned)
        emit(metric="mos", raters=rep.n_raters, dropped=rep.dropped, naturalness=rep.naturalness,
             naturalness_ci=list(rep.naturalness_ci), similarity=rep.similarity,
             similarity_ci=list(rep.similarity_ci), items=rep.item_means)
        say(f"naturalness {rep.naturalness:.2f}, similarity {rep.similarity:.2f} "
            f"from {rep.n_raters} raters ({rep.dropped} dropped)")
    elif args.metric == "pesq":
        if not args.file:
            raise UsageError("eval pesq needs --file")
        rep = metrics.ingest_pesq(args.file)
        emit(metric="pesq", means=rep.means, counts=rep.counts)
        for split in metrics.PESQ_SPLITS:
            if split in rep.means:
                say(f"{split} {rep.means[split]:.2f} over {rep.counts[split]} utterances")
    else:
        return _eval_umap(cfg, args)
    return EXIT_OK


def _eval_umap(cfg: RunConfig, args) -> int:
    """Project encoder embeddings of corpus audio (original) and of WAVs in --clones
    (cloned; speaker = file-name prefix before the first underscore)."""
    from .pipeline import speaker_embedding

    enc, _, _ = load_checkpoint(_require(checkpoint_path(cfg, "encoder"), "run `train encoder`"),
                                expected_kind="encoder")
    man = corpus.scan_corpus(cfg.corpus)
    vecs, labels = [], []
    for r in sorted(man.records, key=lambda r: r.utt_id):
        vecs.append(speaker_embedding(enc, fileio.read_wav(r.wav_path)))
        labels.append((r.speaker_id, "original"))
    if args.clones:
        for p in sorted(Path(args.clones).glob("*.wav")):
            vecs.append(speaker_embedding(enc, fileio.read_wav(p)))
            labels.append((p.stem.split("_")[0], "cloned"))
    xy = metrics.umap_project(np.array(vecs), args.neighbors, args.min_dist, args.epochs, cfg.seed)
    points = [metrics.ProjectionPoint(x, y, s, src) for (x, y), (s, src) in zip(xy, labels)]
    out = Path(args.out) if args.out else cfg.workdir / "eval" / "umap.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_projection(points, out)
    sil = metrics.silhouette(xy, [s for s, _ in labels])
    emit(metric="umap", points=len(points), silhouette=sil, out=str(out))
    say(f"silhouette by speaker {sil:.4f}; projection written to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .checks import TOLERANCE, run_gradchecks

    results = run_gradchecks(cfg.seed)
    for name, err in results.items():
        emit(check=name, max_rel_error=err, passed=err < TOLERANCE)
    failed = [n for n, e in results.items() if not e < TOLERANCE]
    say("all gradient checks passed" if not failed else f"failed: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_DATA


# -- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nvc", description="Toy-scale voice cloning pipeline.")
    p.add_argument("--config", help="key = value config file with [section] headers")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--workdir", help="working directory (default: $NVC_WORKDIR or ./work)")
    p.add_argument("--seed", type=int, help="override run.seed")
    sp = p.add_subparsers(dest="command", parser_class=_Parser)
    sp.required = True

    sp.add_parser("toy-corpus", help="write the seeded synthetic corpus")

    pre = sp.add_parser("preprocess", help="feature extraction for one stage")
    pre.add_argument("stage", choices=["encoder", "synth", "vocoder"])

    tr = sp.add_parser("train", help="train one model")
    tr.add_argument("model", choices=["encoder", "synth", "vocoder"])
    tr.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    tr.add_argument("--freeze", action="append", metavar="PREFIX", help="freeze matching parameters")
    tr.add_argument("--out", help="checkpoint path (default: workdir/checkpoints/<model>.nvc)")

    cl = sp.add_parser("clone", help="speak text in the voice of a reference recording")
    cl.add_argument("--text", required=True)
    cl.add_argument("--ref", required=True, help="reference WAV (16 kHz mono 16-bit)")
    cl.add_argument("--out", required=True)
    cl.add_argument("--vocoder", choices=["griffinlim", "neural"], default="griffinlim")
    cl.add_argument("--encoder", help="encoder checkpoint")
    cl.add_argument("--synthesizer", help="synthesizer checkpoint")
    cl.add_argument("--vocoder-checkpoint", help="vocoder checkpoint for --vocoder neural")

    ev = sp.add_parser("eval", help="evaluation metrics")
    ev.add_argument("metric", choices=["eer", "mos", "pesq", "umap"])
    ev.add_argument("--genuine", help="eer: whitespace-separated genuine scores")
    ev.add_argument("--impostor", help="eer: whitespace-separated impostor scores")
    ev.add_argument("--sheet", help="mos: ratings CSV")
    ev.add_argument("--file", help="pesq: utt_id,split,score CSV")
    ev.add_argument("--clones", help="umap: directory of cloned WAVs named <speaker>_*.wav")
    ev.add_argument("--out", help="umap: projection CSV path")
    ev.add_argument("--neighbors", type=int, default=15)
    ev.add_argument("--min-dist", type=float, default=0.1)
    ev.add_argument("--epochs", type=int, default=200)

    sp.add_parser("gradcheck", help="finite-difference checks of every gradient")
    return p


COMMANDS = {
    "toy-corpus": cmd_toy_corpus,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "clone": cmd_clone,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            cfg.set(key.strip(), value.strip())
        if args.workdir:
            cfg.set("run.workdir", args.workdir)
        if args.seed is not None:
            cfg.set("run.seed", str(args.seed))
        cfg.resolve_paths()
        return COMMANDS[args.command](cfg, args)
    except UsageError as e:
        say(str(e))
        return EXIT_USAGE
    except ConfigError as e:
        say(f"config error: {e}")
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (ValueError, OSError, CorpusError, CheckpointError) as e:
        say(f"error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
