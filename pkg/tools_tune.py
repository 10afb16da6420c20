"""Exploratory training run to calibrate the acceptance configuration."""
import os
for v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(v, "1")

import json
import sys
import time

import numpy as np

from streamvqa.config import RunConfig, validate_config
from streamvqa.pipeline import VideoQaModel, eval_grounding, train_stage1, train_stage2
from streamvqa.synthdata import SymbolBook, build_dataset, gen_clip_samples
from streamvqa.tokenizer import Vocab


def main(qa_target=600, epochs_warmup=3, epochs_joint=2, lr2=1e-3, regime="warmup"):
    cfg = RunConfig(train_qa_target=qa_target, heldout_videos=12,
                    epochs_warmup=epochs_warmup, epochs_joint=epochs_joint,
                    lr_stage2=lr2, regime=regime)
    validate_config(cfg)
    vocab = Vocab(cfg.alphabet_size, cfg.max_clips)
    book = SymbolBook(cfg.seed_data, cfg.alphabet_size, cfg.merged_channels)
    t0 = time.time()
    ds = build_dataset(
        seed=cfg.seed_data, vocab=vocab, book=book, clips=cfg.clips_per_video,
        frames_per_clip=cfg.frames_per_clip, rate=cfg.frame_rate,
        frame_tokens=cfg.frame_tokens, frame_channels=cfg.frame_channels,
        events_min=cfg.events_min, events_max=cfg.events_max,
        intensity=cfg.event_intensity, noise_sigma=cfg.noise_sigma,
        train_qa_target=cfg.train_qa_target, heldout_videos=cfg.heldout_videos,
        warmup_fraction=cfg.warmup_fraction)
    print(f"dataset: {len(ds.train)} train videos, {ds.qa_count('train')} QA, "
          f"{time.time()-t0:.1f}s", flush=True)

    model = VideoQaModel(cfg, vocab)
    t0 = time.time()
    samples = gen_clip_samples(
        seed=cfg.seed_data + 1, count=cfg.stage1_samples, vocab=vocab, book=book,
        frames_per_clip=cfg.frames_per_clip, rate=cfg.frame_rate,
        frame_tokens=cfg.frame_tokens, frame_channels=cfg.frame_channels,
        intensity=cfg.event_intensity, noise_sigma=cfg.noise_sigma)
    h1 = train_stage1(model, samples, log=lambda m: print(m, flush=True))
    print(f"stage1 took {time.time()-t0:.0f}s", flush=True)

    t0 = time.time()
    h2 = train_stage2(model, ds, regime=regime, track_selection=True,
                      log=lambda m: print(m, flush=True))
    print(f"stage2 took {time.time()-t0:.0f}s selection_acc={h2['selection_acc']}",
          flush=True)

    t0 = time.time()
    summary, records = eval_grounding(model, ds.heldout)
    print(f"eval took {time.time()-t0:.0f}s", flush=True)
    what = [r for r in records if r.kind == "what-at-time"]
    top1 = [int(np.argmax(r.similarities)) + 1 == r.grounding[0] for r in what]
    print(json.dumps({
        "hit": summary.hit_rate, "mIoP": summary.mean_iop,
        "acc": summary.answer_acc, "joint": summary.joint_acc,
        "what_top1": float(np.mean(top1)),
        "by_kind": {k: {"hit": s.hit_rate, "acc": s.answer_acc, "mIoP": s.mean_iop}
                    for k, s in summary.by_kind.items()},
    }, indent=1), flush=True)
    return model, ds, summary


if __name__ == "__main__":
    qa = int(sys.argv[1]) if len(sys.argv) > 1 else 600
    ew = int(sys.argv[2]) if len(sys.argv) > 2 else 3
    ej = int(sys.argv[3]) if len(sys.argv) > 3 else 2
    regime = sys.argv[4] if len(sys.argv) > 4 else "warmup"
    main(qa, ew, ej, regime=regime)
