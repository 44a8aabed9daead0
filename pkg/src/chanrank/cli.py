"""Command-line interface.

Subcommands: ``simulate`` (render a synthetic dataset), ``train`` (fit the
neural ranker), ``train-ev`` (tune envelope-variance band weights),
``rank`` (score a manifest with any method), ``evaluate`` (multi-method
comparison) and ``verify`` (fast self-checks).

Progress goes to stderr, machine-readable results to files or stdout.
Exit codes: 0 success, 1 runtime failure, 2 usage error. Every run writes
its fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dsp import cepstral_frames, logmel_features, read_wav, subband_envelopes
from .evaluation import evaluate_methods, format_report_table, rank_channels
from .manifest import (load_envelope_dataset, load_ranking_dataset,
                       read_manifest, read_rankings, require_relevance,
                       resolve_path, write_rankings)
from .scene import ScenePlacement, simulate_dataset
from .selectors import (ChannelScores, EvWeights, cepstral_distance,
                        closest_select, envelope_variance, posterior_entropy,
                        random_select, sdr_scores, train_ev_weights)
from .tcn import RankerConfig, load_checkpoint, save_checkpoint, score_utterance
from .training import (SpecAugmentConfig, TrainConfig, TrainingDivergedError,
                       load_train_state, train)
from .verify import run_all

RANK_METHODS = ("micrank", "ev", "cd-blind", "cd-informed", "entropy",
                "sdr", "closest", "random")


def default_run_config() -> dict:
    return {
        "simulate": {
            "n_utterances": 100,
            "seed": 0,
            "duration_s": 2.0,
            "with_noise": True,
            "n_mics": 8,
            "max_order": 20,
            "wav_format": "float32",
            "sources_dir": None,
            "noise_dir": None,
        },
        "ranker": asdict(RankerConfig()),
        "train": asdict(TrainConfig()),
        "evaluate": {"k": 3},
    }


def _merge_section(defaults: dict, override: dict, path: str) -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ValueError(f"unknown config key {path}.{key}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_section(defaults[key], value, f"{path}.{key}")
        else:
            merged[key] = value
    return merged


def load_run_config(path) -> dict:
    cfg = default_run_config()
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        user = json.load(fh)
    for section, content in user.items():
        if section not in cfg:
            raise ValueError(f"unknown config section {section!r}")
        cfg[section] = _merge_section(cfg[section], content, section)
    return cfg


def write_resolved_config(cfg: dict, where: Path) -> None:
    with open(where, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _apply_overrides(section: dict, pairs) -> None:
    for key, value in pairs:
        if value is not None:
            section[key] = value


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    sim = cfg["simulate"]
    _apply_overrides(sim, [
        ("n_utterances", args.n), ("seed", args.seed),
        ("duration_s", args.duration), ("wav_format", args.wav_format),
        ("max_order", args.max_order),
        ("sources_dir", args.sources_dir), ("noise_dir", args.noise_dir),
    ])
    if args.no_noise:
        sim["with_noise"] = False
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def list_wavs(d):
        if d is None:
            return None
        wavs = sorted(Path(d).glob("*.wav"))
        if not wavs:
            raise ValueError(f"no .wav files in {d}")
        return wavs

    manifest = simulate_dataset(
        out_dir,
        n_utterances=sim["n_utterances"],
        seed=sim["seed"],
        duration_s=sim["duration_s"],
        with_noise=sim["with_noise"],
        n_mics=sim["n_mics"],
        max_order=sim["max_order"],
        wav_format=sim["wav_format"],
        source_wavs=list_wavs(sim["sources_dir"]),
        noise_wavs=list_wavs(sim["noise_dir"]),
        progress=lambda i, n: _progress(f"simulate: {i}/{n}")
        if i % 25 == 0 or i == n else None,
    )
    write_resolved_config(cfg, out_dir / "resolved_config.json")
    print(str(manifest))
    return 0


def _train_config_from(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["specaugment"] = SpecAugmentConfig(**t["specaugment"])
    return TrainConfig(**t)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_overrides(cfg["train"], [
        ("strategy", args.strategy), ("lr", args.lr), ("epochs", args.epochs),
        ("batch_utterances", args.batch), ("seed", args.seed),
        ("relevance_metric", args.metric), ("delta", args.delta),
        ("momentum", args.momentum), ("weight_decay", args.weight_decay),
    ])
    train_cfg = _train_config_from(cfg)
    ranker_cfg = RankerConfig(**cfg["ranker"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    _progress(f"train: loading {args.train_manifest}")
    train_set = load_ranking_dataset(args.train_manifest,
                                     metric=train_cfg.relevance_metric,
                                     strategy=train_cfg.strategy)
    valid_set = load_ranking_dataset(args.valid_manifest,
                                     metric=train_cfg.relevance_metric,
                                     strategy=train_cfg.strategy)
    resume_state = load_train_state(args.resume) if args.resume else None

    result = train(
        train_set, valid_set, ranker_cfg, train_cfg,
        resume_state=resume_state,
        state_path=out_dir / "train_state.bin",
        log=lambda e: _progress(
            f"epoch {e['epoch']}: loss {e['train_loss']:.5f} "
            f"valid {e['valid_metric']:.4f}"
        ),
    )
    save_checkpoint(out_dir / "checkpoint.bin", result.model)
    with open(out_dir / "history.jsonl", "w", encoding="utf-8") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry) + "\n")
    write_resolved_config(cfg, out_dir / "resolved_config.json")
    print(str(out_dir / "checkpoint.bin"))
    return 0


def cmd_train_ev(args) -> int:
    dataset = load_envelope_dataset(args.manifest)
    weights = train_ev_weights(dataset, lr=args.lr, epochs=args.epochs,
                               seed=args.seed)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"alpha": [float(a) for a in weights.alpha]}, fh)
        fh.write("\n")
    print(str(out))
    return 0


def _parse_method(spec: str) -> tuple[str, str]:
    name, _, arg = spec.partition(":")
    if name not in RANK_METHODS:
        raise ValueError(
            f"unknown method {name!r}; choose from {', '.join(RANK_METHODS)}"
        )
    return name, arg


def _load_posteriors(post_dir: Path, utt_id: str, n_channels: int):
    mats = []
    for i in range(n_channels):
        npy = post_dir / f"{utt_id}.ch{i}.npy"
        csv = post_dir / f"{utt_id}.ch{i}.csv"
        if npy.exists():
            mats.append(np.load(npy))
        elif csv.exists():
            mats.append(np.loadtxt(csv, delimiter=",", ndmin=2))
        else:
            raise ValueError(
                f"record {utt_id!r}: missing posterior file {npy.name} (or .csv)"
            )
    return mats


def cmd_rank(args) -> int:
    method, method_arg = _parse_method(args.method)
    records = read_manifest(args.manifest)
    model = None
    ev_weights = None
    if method == "micrank":
        if not method_arg:
            raise ValueError("micrank needs a checkpoint: --method micrank:<path>")
        model = load_checkpoint(method_arg)
    elif method == "ev" and method_arg:
        with open(method_arg, "r", encoding="utf-8") as fh:
            ev_weights = EvWeights(alpha=np.asarray(json.load(fh)["alpha"]))
    elif method == "random":
        if not method_arg:
            raise ValueError("random needs a seed: --method random:<seed>")
        base_seed = int(method_arg)
    elif method == "entropy":
        if not method_arg:
            raise ValueError("entropy needs a posterior dir: --method entropy:<dir>")
        post_dir = Path(method_arg)

    rankings = []
    for idx, rec in enumerate(records):
        paths = [resolve_path(args.manifest, p) for p in rec["channel_paths"]]
        utt_id = rec["id"]
        if method == "micrank":
            feats = [logmel_features(read_wav(p)).frames for p in paths]
            if feats and feats[0].shape[1] != model.config.n_mels:
                raise ValueError(
                    f"checkpoint config mismatch: model expects "
                    f"{model.config.n_mels} mel bands, features have "
                    f"{feats[0].shape[1]}"
                )
            scores = score_utterance(model, feats)
        elif method == "ev":
            envs = [subband_envelopes(read_wav(p)) for p in paths]
            scores = envelope_variance(envs, ev_weights)
        elif method in ("cd-blind", "cd-informed"):
            ceps = [cepstral_frames(read_wav(p)) for p in paths]
            if method == "cd-informed":
                if not rec.get("clean_path"):
                    raise ValueError(
                        f"record {utt_id!r}: cd-informed requires clean_path"
                    )
                ref = cepstral_frames(
                    read_wav(resolve_path(args.manifest, rec["clean_path"]))
                )
                scores = cepstral_distance(ceps, ref)
            else:
                scores = cepstral_distance(ceps, None)
        elif method == "entropy":
            scores = posterior_entropy(
                _load_posteriors(post_dir, utt_id, len(paths))
            )
        elif method == "sdr":
            if not rec.get("clean_path"):
                raise ValueError(f"record {utt_id!r}: sdr requires clean_path")
            ref = read_wav(resolve_path(args.manifest, rec["clean_path"]))
            scores = sdr_scores([read_wav(p) for p in paths], ref)
        elif method == "closest":
            pos = rec.get("positions")
            if not pos:
                raise ValueError(
                    f"record {utt_id!r}: closest requires positions metadata"
                )
            placement = ScenePlacement(
                speaker_pos=np.asarray(pos["speaker"]),
                noise_pos=np.asarray(pos["noise"]),
                mic_pos=np.asarray(pos["mics"]),
                mic_orient=np.asarray(pos["mic_orientations"]),
            )
            scores = closest_select(placement)
        else:  # random
            scores = random_select(len(paths), [base_seed, idx])
        rankings.append(rank_channels(scores, utt_id=utt_id))
        if (idx + 1) % 50 == 0 or idx + 1 == len(records):
            _progress(f"rank[{args.method}]: {idx + 1}/{len(records)}")

    if args.out:
        out = Path(args.out)
        write_rankings(out, rankings)
        write_resolved_config(
            {"command": "rank", "manifest": str(args.manifest),
             "method": args.method},
            out.with_name(out.name + ".config.json"),
        )
        print(str(out))
    else:
        write_rankings(sys.stdout, rankings)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    if args.k is not None:
        cfg["evaluate"]["k"] = args.k
    k = cfg["evaluate"]["k"]
    records = read_manifest(args.manifest)
    relevance = {
        rec["id"]: np.asarray(require_relevance(rec, args.manifest),
                              dtype=np.float64)
        for rec in records
    }
    by_method = {}
    for path in args.rankings:
        for r in read_rankings(path):
            by_method.setdefault(r.method, []).append(r)
    report = evaluate_methods(by_method, relevance, k=k)
    print(format_report_table(report, wer_view=args.wer_view))
    if args.out:
        out = Path(args.out)
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_resolved_config(
            {"command": "evaluate", "manifest": str(args.manifest),
             "rankings": [str(p) for p in args.rankings],
             "evaluate": cfg["evaluate"]},
            out.with_name(out.name + ".config.json"),
        )
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("method,id,channel,score,relevance\n")
            for row in report.per_utterance:
                for ch, (s, v) in enumerate(zip(row["scores"], row["relevance"])):
                    fh.write(f"{row['method']},{row['id']},{ch},{s!r},{v!r}\n")
    return 0


def cmd_verify(args) -> int:
    ok = run_all(out=print)
    return 0 if ok else 1


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="chanrank",
        description="Channel selection for ad-hoc microphone networks",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="render a synthetic dataset")
    sim.add_argument("out_dir")
    sim.add_argument("--config")
    sim.add_argument("--n", type=int, help="number of utterances")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--duration", type=float, help="source duration in seconds")
    sim.add_argument("--no-noise", action="store_true")
    sim.add_argument("--wav-format", choices=("float32", "pcm16"))
    sim.add_argument("--max-order", type=int)
    sim.add_argument("--sources-dir", help="WAV corpus for source material")
    sim.add_argument("--noise-dir", help="WAV corpus for point noise")
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="train the neural ranker")
    tr.add_argument("train_manifest")
    tr.add_argument("valid_manifest")
    tr.add_argument("out_dir")
    tr.add_argument("--config")
    tr.add_argument("--strategy",
                    choices=("pointwise_xce", "pointwise_mse", "ranknet",
                             "listnet"))
    tr.add_argument("--lr", type=float)
    tr.add_argument("--momentum", type=float)
    tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--delta", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--metric", choices=("wa", "wer", "raw"))
    tr.add_argument("--resume", help="training-state file to continue from")
    tr.set_defaults(func=cmd_train)

    tev = sub.add_parser("train-ev", help="tune envelope-variance weights")
    tev.add_argument("manifest")
    tev.add_argument("out", help="output weights JSON")
    tev.add_argument("--lr", type=float, default=1.0)
    tev.add_argument("--epochs", type=int, default=50)
    tev.add_argument("--seed", type=int, default=0)
    tev.set_defaults(func=cmd_train_ev)

    rk = sub.add_parser("rank", help="rank channels of a manifest")
    rk.add_argument("manifest")
    rk.add_argument("--method", required=True,
                    help="micrank:<ckpt> | ev[:weights.json] | cd-blind | "
                         "cd-informed | entropy:<dir> | sdr | closest | "
                         "random:<seed>")
    rk.add_argument("--out", help="rankings JSONL (default stdout)")
    rk.set_defaults(func=cmd_rank)

    ev = sub.add_parser("evaluate", help="compare rankings against labels")
    ev.add_argument("manifest")
    ev.add_argument("rankings", nargs="+", help="rankings JSONL files")
    ev.add_argument("--config")
    ev.add_argument("--k", type=int)
    ev.add_argument("--out", help="report JSON path")
    ev.add_argument("--csv", help="per-utterance CSV path")
    ev.add_argument("--wer-view", action="store_true",
                    help="also print 1 - relevance columns")
    ev.set_defaults(func=cmd_evaluate)

    vf = sub.add_parser("verify", help="run the fast verification suite")
    vf.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
