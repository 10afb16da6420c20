"""Run configuration: one flat, human-editable key = value file.

Every knob of the pipeline lives here; command-line flags override file
values, and the effective config is echoed into output artifacts for
provenance. Parsing and serialization round-trip exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .selector import SIMILARITY_MODES
from .streaming import TIME_PROMPT_MODES

REGIMES = ("none", "warmup", "mixed", "warmup+mixed")
DECODING_MODES = ("greedy", "temperature")


class ConfigError(ValueError):
    """A config file or value failed validation."""


@dataclass
class RunConfig:
    # seeds: every random draw in the pipeline is funneled through one of these
    seed_data: int = 11
    seed_init: int = 7
    seed_gumbel: int = 23

    # synthetic stream geometry
    frames_per_clip: int = 8        # T
    frame_rate: int = 1
    frame_tokens: int = 64          # N0, before adjacent merging
    frame_channels: int = 8         # c, before adjacent merging
    clips_per_video: int = 16       # K for generated videos
    max_clips: int = 64             # upper bound, sizes the time-bucket vocabulary
    alphabet_size: int = 10
    noise_sigma: float = 0.5
    event_intensity: float = 1.0
    events_min: int = 3
    events_max: int = 5

    # dataset sizes
    train_qa_target: int = 2000
    heldout_videos: int = 25
    stage1_samples: int = 768
    multi_choice_fraction: float = 0.0

    # encoder model
    enc_dim: int = 64
    enc_layers: int = 4
    enc_heads: int = 4
    enc_mlp_ratio: int = 4
    enc_max_seq: int = 512
    tap_layer: int = 2

    # reader model
    reader_dim: int = 64
    reader_layers: int = 4
    reader_heads: int = 4
    reader_mlp_ratio: int = 4
    reader_max_seq: int = 640

    # condensation and selection
    summary_tokens: int = 2         # P
    select_count: int = 4           # V
    similarity: str = "cosine"
    time_prompt: str = "clip+memory"
    tau_select: float = 0.5

    # training
    regime: str = "warmup"
    warmup_fraction: float = 0.25
    kl_weight: float = 0.5
    lr_align: float = 3e-3
    lr_stage1: float = 1.5e-3
    lr_stage2: float = 1e-3
    epochs_align: int = 1
    epochs_stage1: int = 3
    epochs_warmup: int = 3
    epochs_joint: int = 2
    stage1_batch: int = 8
    grad_through_memories: bool = True
    grad_through_selection: bool = True

    # decoding and evaluation
    decoding: str = "greedy"
    temperature: float = 1.0
    eval_workers: int = 1

    @property
    def merged_tokens(self) -> int:
        """N: per-frame token count after adjacent merging."""
        return self.frame_tokens // 4

    @property
    def merged_channels(self) -> int:
        """C: channel count after adjacent merging."""
        return self.frame_channels * 4

    @property
    def memory_rows(self) -> int:
        """T*P: rows of one condensed memory."""
        return self.frames_per_clip * self.summary_tokens

    @property
    def reader_memory_tokens(self) -> int:
        """V*T*P: memory tokens the reader consumes, independent of K."""
        return self.select_count * self.memory_rows


def validate_config(cfg: RunConfig) -> None:
    """Cross-field checks with field-precise messages."""

    def need(cond: bool, field_name: str, msg: str):
        if not cond:
            raise ConfigError(f"{field_name}: {msg}")

    need(cfg.frame_tokens % 4 == 0, "frame_tokens", f"must be divisible by 4, got {cfg.frame_tokens}")
    need(cfg.frames_per_clip >= 1, "frames_per_clip", "must be >= 1")
    need(cfg.frame_rate >= 1, "frame_rate", "must be >= 1")
    need(1 <= cfg.summary_tokens < cfg.merged_tokens, "summary_tokens",
         f"must satisfy 1 <= P < N={cfg.merged_tokens}, got {cfg.summary_tokens}")
    need(1 <= cfg.select_count <= cfg.clips_per_video, "select_count",
         f"must satisfy 1 <= V <= K={cfg.clips_per_video}, got {cfg.select_count}")
    need(cfg.clips_per_video <= cfg.max_clips, "clips_per_video",
         f"exceeds max_clips={cfg.max_clips}")
    need(1 <= cfg.tap_layer <= cfg.enc_layers, "tap_layer",
         f"must be within [1, {cfg.enc_layers}], got {cfg.tap_layer}")
    need(cfg.enc_dim % cfg.enc_heads == 0, "enc_dim",
         f"{cfg.enc_dim} not divisible by enc_heads={cfg.enc_heads}")
    need(cfg.reader_dim % cfg.reader_heads == 0, "reader_dim",
         f"{cfg.reader_dim} not divisible by reader_heads={cfg.reader_heads}")
    need(1 <= cfg.alphabet_size <= 26, "alphabet_size", "must be in [1, 26]")
    need(cfg.alphabet_size <= cfg.merged_channels, "alphabet_size",
         f"needs {cfg.alphabet_size} orthonormal directions in C={cfg.merged_channels} channels")
    need(1 <= cfg.events_min <= cfg.events_max, "events_min", "must satisfy 1 <= min <= max")
    need(cfg.events_max <= cfg.clips_per_video, "events_max",
         f"exceeds clips_per_video={cfg.clips_per_video}")
    need(cfg.similarity in SIMILARITY_MODES, "similarity",
         f"must be one of {SIMILARITY_MODES}, got {cfg.similarity!r}")
    need(cfg.time_prompt in TIME_PROMPT_MODES, "time_prompt",
         f"must be one of {TIME_PROMPT_MODES}, got {cfg.time_prompt!r}")
    need(cfg.regime in REGIMES, "regime", f"must be one of {REGIMES}, got {cfg.regime!r}")
    need(cfg.decoding in DECODING_MODES, "decoding",
         f"must be one of {DECODING_MODES}, got {cfg.decoding!r}")
    need(cfg.tau_select > 0, "tau_select", "must be positive")
    need(0.0 <= cfg.warmup_fraction <= 1.0, "warmup_fraction", "must be in [0, 1]")
    need(cfg.eval_workers >= 1, "eval_workers", "must be >= 1")


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def _parse_value(field_type, raw: str, key: str):
    raw = raw.strip()
    if field_type is bool:
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if field_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if field_type is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig(**vars(base)) if base is not None else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        ftype = kinds.get(types[key], str) if isinstance(types[key], str) else types[key]
        setattr(cfg, key, _parse_value(ftype, raw, key))
    validate_config(cfg)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (optional) and apply key=value overrides on top."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config_text(p.read_text())
    if overrides:
        text = "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = parse_config_text(text, base=cfg)
    validate_config(cfg)
    return cfg


def config_fingerprint(cfg: RunConfig) -> str:
    """Short stable hash of the fields that shape encoder outputs."""
    relevant = [
        cfg.frames_per_clip, cfg.frame_rate, cfg.frame_tokens, cfg.frame_channels,
        cfg.summary_tokens, cfg.enc_dim, cfg.enc_layers, cfg.enc_heads,
        cfg.enc_mlp_ratio, cfg.tap_layer, cfg.time_prompt, cfg.alphabet_size,
        cfg.max_clips,
    ]
    blob = "|".join(str(v) for v in relevant).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
