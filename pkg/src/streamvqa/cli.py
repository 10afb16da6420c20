"""Operator surface: data generation, training, encoding, answering, evaluation,
ablation sweeps, and the token/latency budget report.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
Every failure prints one machine-parsable line: `error: <category>: <message>`.
"""

import os

# the workload is many small matmuls; multi-threaded BLAS only adds sync
# overhead at these shapes (must be set before numpy loads)
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .autograd import ContainerError
from .config import ConfigError, RunConfig, config_fingerprint, load_config, \
    serialize_config, validate_config
from .pipeline import VideoQaModel, answer, eval_grounding, summarize_records, \
    train_stage1, train_stage2
from .streaming import load_bank, save_bank
from .synthdata import SymbolBook, build_dataset, gen_clip_samples, load_stream, \
    read_dataset, validate_qa, write_dataset
from .tokenizer import Vocab

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 2, 3, 4


class DataError(Exception):
    """Dataset, stream or bank files are missing or malformed."""


class CheckpointError(Exception):
    """A model checkpoint is missing, malformed or incompatible."""


def _log(msg: str) -> None:
    print(msg, flush=True)


def _build_vocab(cfg: RunConfig) -> Vocab:
    return Vocab(cfg.alphabet_size, cfg.max_clips)


def _build_book(cfg: RunConfig) -> SymbolBook:
    return SymbolBook(cfg.seed_data, cfg.alphabet_size, cfg.merged_channels)


def _load_model(path, cfg: RunConfig, vocab: Vocab) -> VideoQaModel:
    p = Path(path) if path else None
    if p is None or not p.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        return VideoQaModel.load(p, cfg, vocab)
    except (ContainerError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {p}: {exc}") from exc


def _load_dataset(path):
    p = Path(path)
    if not (p / "qa.jsonl").exists():
        raise DataError(f"dataset not found at {p}")
    try:
        return read_dataset(p)
    except (ContainerError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {p}: {exc}") from exc


def _echo_config(cfg: RunConfig, out_path: Path) -> None:
    out_path.write_text(serialize_config(cfg))


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    book = _build_book(cfg)
    ds = build_dataset(
        seed=cfg.seed_data, vocab=vocab, book=book, clips=cfg.clips_per_video,
        frames_per_clip=cfg.frames_per_clip, rate=cfg.frame_rate,
        frame_tokens=cfg.frame_tokens, frame_channels=cfg.frame_channels,
        events_min=cfg.events_min, events_max=cfg.events_max,
        intensity=cfg.event_intensity, noise_sigma=cfg.noise_sigma,
        train_qa_target=cfg.train_qa_target, heldout_videos=cfg.heldout_videos,
        warmup_fraction=cfg.warmup_fraction,
        multi_choice_fraction=cfg.multi_choice_fraction)
    for rec in ds.train + ds.heldout:
        if not validate_qa(rec.plan, rec.qa, vocab):
            raise DataError(f"generated QA failed replay validation on video {rec.video_id}")
    out = Path(args.out)
    write_dataset(ds, out)
    _echo_config(cfg, out / "config.txt")
    _log(f"gen-data: {len(ds.train)} train videos ({ds.qa_count('train')} QA), "
         f"{len(ds.heldout)} held-out videos ({ds.qa_count('heldout')} QA) -> {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    book = _build_book(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history: dict = {}

    if args.init_from:
        model = _load_model(args.init_from, cfg, vocab)
    elif args.stage == "2":
        raise CheckpointError("stage 2 requires --init-from with a stage-1 checkpoint")
    else:
        model = VideoQaModel(cfg, vocab)

    if args.stage in ("1", "all"):
        samples = gen_clip_samples(
            seed=cfg.seed_data + 1, count=cfg.stage1_samples, vocab=vocab, book=book,
            frames_per_clip=cfg.frames_per_clip, rate=cfg.frame_rate,
            frame_tokens=cfg.frame_tokens, frame_channels=cfg.frame_channels,
            intensity=cfg.event_intensity, noise_sigma=cfg.noise_sigma)
        history["stage1"] = train_stage1(model, samples, log=_log)
    if args.stage in ("2", "all"):
        if not args.data:
            raise DataError("stage 2 requires --data with a generated dataset")
        ds = _load_dataset(args.data)
        history["stage2"] = train_stage2(model, ds, regime=cfg.regime,
                                         track_selection=True, log=_log)
    model.save(out)
    sidecar = out.with_suffix(out.suffix + ".history.json")
    sidecar.write_text(json.dumps(
        {"config": serialize_config(cfg), "history": history}, indent=2))
    _log(f"train: stage {args.stage} done, checkpoint -> {out}")
    return 0


def cmd_encode(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    model = _load_model(args.ckpt, cfg, vocab)
    try:
        stream = load_stream(args.video)
    except (ContainerError, ValueError) as exc:
        raise DataError(f"cannot read stream {args.video}: {exc}") from exc
    t0 = time.perf_counter()
    bank = model.encode(stream)
    dt = time.perf_counter() - t0
    save_bank(args.out, bank)
    _log(f"encode: {len(bank.entries)} memories of shape "
         f"({cfg.memory_rows}, {cfg.enc_dim}) in {dt:.2f}s -> {args.out}")
    return 0


def _selection_record(question: str, res) -> dict:
    sel = res.selection
    return {
        "question": question,
        "answer": res.text,
        "similarities": [round(float(s), 6) for s in sel.scores],
        "indices": sel.indices,
        "answer_tokens": res.tokens,
    }


def cmd_ask(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    model = _load_model(args.ckpt, cfg, vocab)
    try:
        bank = load_bank(args.bank)
    except (ContainerError, ValueError) as exc:
        raise DataError(f"cannot read bank {args.bank}: {exc}") from exc
    if bank.fingerprint and bank.fingerprint != config_fingerprint(cfg):
        raise DataError(
            f"bank {args.bank} was encoded under a different configuration "
            f"(fingerprint {bank.fingerprint} != {config_fingerprint(cfg)})")
    try:
        question = vocab.encode(args.question)
    except KeyError as exc:
        raise DataError(f"question uses tokens outside the vocabulary: {exc}") from exc
    res = answer(model, bank, question)
    record = _selection_record(args.question, res)
    record["spans"] = [list(bank.entries[p].span) for p in res.selection.positions]
    _log(f"answer: {res.text}")
    _log("selection: " + json.dumps(
        {k: record[k] for k in ("indices", "spans", "similarities")}))
    if args.report:
        with open(args.report, "a") as fh:
            fh.write(json.dumps(record) + "\n")
    return 0


def _summary_dict(summary) -> dict:
    d = asdict(summary)
    return d


def cmd_eval(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    model = _load_model(args.ckpt, cfg, vocab)
    ds = _load_dataset(args.data)
    videos = ds.heldout if args.split == "heldout" else ds.train
    if not videos:
        raise DataError(f"dataset has no videos in split {args.split!r}")
    summary, records = eval_grounding(model, videos)
    _log(f"eval[{args.split}]: n={summary.count} hit={summary.hit_rate:.3f} "
         f"mIoP={summary.mean_iop:.3f} IoP@0.5={summary.iop_at_05:.3f} "
         f"acc={summary.answer_acc:.3f} joint={summary.joint_acc:.3f}")
    for kind, sub in summary.by_kind.items():
        _log(f"  {kind}: n={sub.count} hit={sub.hit_rate:.3f} mIoP={sub.mean_iop:.3f} "
             f"acc={sub.answer_acc:.3f} joint={sub.joint_acc:.3f}")
    if args.report:
        path = Path(args.report)
        with open(path, "w") as fh:
            for r in records:
                fh.write(json.dumps(asdict(r)) + "\n")
        path.with_suffix(path.suffix + ".summary.json").write_text(json.dumps(
            {"config": serialize_config(cfg), "summary": _summary_dict(summary)},
            indent=2))
        _log(f"eval: per-question records -> {path}")
    return 0


def _eval_line(tag: str, summary) -> str:
    return (f"{tag}: hit={summary.hit_rate:.3f} mIoP={summary.mean_iop:.3f} "
            f"acc={summary.answer_acc:.3f} joint={summary.joint_acc:.3f}")


def cmd_ablate(cfg: RunConfig, args) -> int:
    vocab = _build_vocab(cfg)
    ds = _load_dataset(args.data)
    videos = ds.heldout
    rows: list[dict] = []

    def add_row(name, summary):
        row = {"variant": name, "hit": summary.hit_rate, "mIoP": summary.mean_iop,
               "acc": summary.answer_acc, "joint": summary.joint_acc}
        rows.append(row)
        _log(_eval_line(name, summary))

    if args.axis in ("memory", "selection", "similarity", "select_count"):
        model = _load_model(args.ckpt, cfg, vocab)
        if args.axis == "memory":
            add_row("memory=on", eval_grounding(model, videos)[0])
            add_row("memory=off", eval_grounding(model, videos, disable_memory=True)[0])
        elif args.axis == "selection":
            add_row("selection=adaptive", eval_grounding(model, videos)[0])
            add_row("selection=last-V", eval_grounding(model, videos, force_last=True)[0])
        elif args.axis == "similarity":
            for mode in ("cosine", "dot"):
                model.cfg = replace(cfg, similarity=mode)
                add_row(f"similarity={mode}", eval_grounding(model, videos)[0])
            model.cfg = cfg
        else:
            for v in (1, 2, 4, 8):
                if v > cfg.clips_per_video:
                    continue
                model.cfg = replace(cfg, select_count=v)
                add_row(f"V={v}", eval_grounding(model, videos)[0])
            model.cfg = cfg
    elif args.axis in ("regime", "tap_layer", "time_prompt"):
        if not args.init_from:
            raise CheckpointError(f"--axis {args.axis} retrains and needs --init-from "
                                  "with a stage-1 checkpoint")
        values = {
            "regime": ["warmup", "none"],
            "tap_layer": sorted({max(1, cfg.enc_layers // 4), max(1, cfg.enc_layers // 2),
                                 cfg.enc_layers}),
            "time_prompt": ["none", "clip", "memory", "clip+memory"],
        }[args.axis]
        for value in values:
            variant = replace(cfg, **{args.axis: value})
            validate_config(variant)
            model = _load_model(args.init_from, variant, vocab)
            train_stage2(model, ds, regime=variant.regime)
            add_row(f"{args.axis}={value}", eval_grounding(model, videos)[0])
    else:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")

    if args.report:
        Path(args.report).write_text(json.dumps(
            {"config": serialize_config(cfg), "axis": args.axis, "rows": rows}, indent=2))
    return 0


def cmd_report_budget(cfg: RunConfig, args) -> int:
    from .synthdata import gen_qa, random_plan, gen_video

    vocab = _build_vocab(cfg)
    book = _build_book(cfg)
    if args.ckpt:
        model = _load_model(args.ckpt, cfg, vocab)
    else:
        model = VideoQaModel(cfg, vocab)
    ks = [int(k) for k in args.clip_counts.split(",")]
    rows = []
    _log(f"report-budget: reader memory tokens = V*T*P = {cfg.reader_memory_tokens} "
         f"(V={cfg.select_count}, T={cfg.frames_per_clip}, P={cfg.summary_tokens})")
    for k in ks:
        if k > cfg.max_clips:
            raise ConfigError(f"clip count {k} exceeds max_clips={cfg.max_clips}")
        rng = np.random.default_rng(cfg.seed_data + k)
        plan = random_plan(rng, clips=k, frames_per_clip=cfg.frames_per_clip,
                           rate=cfg.frame_rate, alphabet=cfg.alphabet_size,
                           events_min=min(cfg.events_min, k), events_max=min(cfg.events_max, k),
                           intensity=cfg.event_intensity, noise_sigma=cfg.noise_sigma)
        stream = gen_video(plan, book, frame_tokens=cfg.frame_tokens,
                           frame_channels=cfg.frame_channels)
        qa = gen_qa(plan, vocab)
        encode_times, answer_times = [], []
        bank = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            bank = model.encode(stream)
            encode_times.append(time.perf_counter() - t0)
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            res = answer(model, bank, qa[0].question)
            answer_times.append(time.perf_counter() - t0)
        row = {
            "K": k,
            "reader_memory_tokens": cfg.reader_memory_tokens,
            "reader_input_tokens": cfg.reader_memory_tokens + len(qa[0].question),
            "encode_sec": float(np.median(encode_times)),
            "answer_sec": float(np.median(answer_times)),
        }
        rows.append(row)
        _log(f"  K={k:4d} memory_tokens={row['reader_memory_tokens']} "
             f"reader_input={row['reader_input_tokens']} "
             f"encode={row['encode_sec']:.3f}s answer={row['answer_sec']:.3f}s")
    if args.report:
        Path(args.report).write_text(json.dumps(
            {"config": serialize_config(cfg), "rows": rows}, indent=2))
    return 0


# -- argument plumbing --------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="path to a key = value config file")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config value (repeatable)")


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamvqa", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic long-video QA dataset")
    _add_common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run stage 1, stage 2, or both")
    _add_common(sp)
    sp.add_argument("--stage", choices=("1", "2", "all"), default="all")
    sp.add_argument("--data", help="dataset directory (stage 2)")
    sp.add_argument("--init-from", help="checkpoint to start from")
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("encode", help="stream-encode one video into a memory bank")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--video", required=True, help="stream container (.vsds)")
    sp.add_argument("--out", required=True, help="bank output path (.vsmb)")
    sp.set_defaults(fn=cmd_encode)

    sp = sub.add_parser("ask", help="answer a question against a persisted bank")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--bank", required=True)
    sp.add_argument("--question", required=True)
    sp.add_argument("--report", help="append the selection record to this JSONL file")
    sp.set_defaults(fn=cmd_ask)

    sp = sub.add_parser("eval", help="grounding and answer-accuracy evaluation")
    _add_common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "heldout"), default="heldout")
    sp.add_argument("--report", help="write per-question records to this JSONL file")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="run one ablation axis and print a comparison")
    _add_common(sp)
    sp.add_argument("--axis", required=True,
                    choices=("memory", "selection", "similarity", "select_count",
                             "regime", "tap_layer", "time_prompt"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", help="trained checkpoint (inference-side axes)")
    sp.add_argument("--init-from", help="stage-1 checkpoint (retraining axes)")
    sp.add_argument("--report", help="write the comparison table to this JSON file")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("report-budget", help="token counts and encode/answer latency vs K")
    _add_common(sp)
    sp.add_argument("--ckpt", help="optional trained checkpoint")
    sp.add_argument("--clip-counts", default="16,32,64")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--report", help="write rows to this JSON file")
    sp.set_defaults(fn=cmd_report_budget)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _parse_overrides(args.set))
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
