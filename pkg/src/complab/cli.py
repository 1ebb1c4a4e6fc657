"""Command-line entry point: synth, train, eval, labels.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
COMPLAB_THREADS caps numpy's BLAS thread pools; it is applied before numpy
is imported, so the heavy imports live inside the command handlers.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


def _cap_threads() -> None:
    cap = os.environ.get("COMPLAB_THREADS")
    if not cap:
        return
    for var in _THREAD_VARS:
        os.environ.setdefault(var, cap)


# ----------------------------------------------------------------- config file

_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

# CLI spellings of the merge policy -> internal variant names
_POLICY_ALIASES = {
    "basic": "basic",
    "min-common": "min_common",
    "min_common": "min_common",
    "vote": "two_epoch_vote",
    "two_epoch_vote": "two_epoch_vote",
}


def load_config_file(path) -> dict:
    """Flat key = value lines; '#' starts a comment; keys mirror TrainConfig."""
    from .errors import ConfigError

    raw: dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return {key: _coerce_config_value(key, value) for key, value in raw.items()}


def _coerce_config_value(key: str, value: str):
    import dataclasses

    from .errors import ConfigError
    from .trainer import TrainConfig

    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if key == "loss_weights":
        raise ConfigError("loss_weights is not settable from a config file")
    ftype = types[key]
    if value.lower() in ("none", "null") and "None" in str(ftype):
        return None
    try:
        if ftype in ("bool", bool):
            return _BOOL_VALUES[value.lower()]
        if ftype in ("int", int):
            return int(value)
        if "float" in str(ftype):
            return float(value)
        if "int" in str(ftype):
            return int(value)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


# -------------------------------------------------------------------- manifest

def _run_id(payload: dict) -> str:
    digest = hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    return digest[:12]


def write_manifest(out_dir: Path, config: dict, datasets: dict, seed: int,
                   config_path=None) -> dict:
    manifest = {
        "run_id": _run_id({"config": config, "datasets": datasets, "seed": seed}),
        "seed": seed,
        "config_path": None if config_path is None else str(config_path),
        "datasets": datasets,
        "output_dir": str(out_dir),
        "config": config,
    }
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "manifest.json")
    return manifest


# -------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .dataio import save_features_binary, save_features_text, save_labels_csv
    from .synthgen import SynthConfig, generate

    config = SynthConfig(
        ids_source=args.ids_source,
        ids_target=args.ids_target,
        per_id=args.per_id,
        cams=args.cams,
        d_in=args.d_in,
        id_dim=args.id_dim,
        intra_sigma=args.intra_sigma,
        shift=args.shift,
        occl_rate=args.occl_rate,
        occl_frac=args.occl_frac,
        cam_sigma=args.cam_sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate(config)

    save = save_features_binary if args.format == "binary" else save_features_text
    ext = "bin" if args.format == "binary" else "txt"
    save(out / f"source_features.{ext}", source.features)
    save(out / f"target_features.{ext}", target.features)
    save_labels_csv(out / "source_labels.csv", source.sample_ids, source.identities, source.cameras)
    # target ground truth goes to its own file; training reads features only
    save_labels_csv(out / "target_labels.csv", target.sample_ids, target.identities, target.cameras)
    with open(out / "synth_config.json", "w") as fh:
        json.dump(config.__dict__, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {source.size} source + {target.size} target samples to {out}")
    return 0


def _build_train_config(args):
    from .trainer import TrainConfig

    overrides = {}
    if args.config:
        overrides.update(load_config_file(args.config))
    for key in ("seed", "epochs", "e1", "e2", "lr", "temperature", "mu", "momentum",
                "predictor", "policy", "min_common", "dbscan_min_pts",
                "dbscan_eps_percentile", "target_fraction", "jitter_sigma"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if "policy" in overrides:
        overrides["policy"] = _POLICY_ALIASES.get(overrides["policy"], overrides["policy"])
    if args.k is not None:
        overrides["k_candidates"] = args.k
    base = TrainConfig().to_dict()
    base.update(overrides)
    config = TrainConfig.from_dict(base)
    if args.ablation:
        config = config.with_ablation(args.ablation)
    return config


def cmd_train(args) -> int:
    import numpy as np

    from .dataio import load_dataset
    from .evalkit import PairQuality, retrieval_eval
    from .report import save_history_figure, write_metrics_csv, write_metrics_json
    from .trainer import Trainer, checkpoint_save

    config = _build_train_config(args)
    source = load_dataset(args.source_features, args.source_labels)
    target = load_dataset(args.target_features, args.target_labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_manifest(
        out,
        config.to_dict(),
        {
            "source_features": str(args.source_features),
            "source_labels": str(args.source_labels),
            "target_features": str(args.target_features),
            "target_labels": str(args.target_labels),
        },
        config.seed,
        config_path=args.config,
    )

    trainer = Trainer(source, target, config)
    history_path = out / "history.jsonl"
    with open(history_path, "w") as history_file:
        def sink(row):
            history_file.write(json.dumps(row) + "\n")
            history_file.flush()
            print(f"epoch {row['epoch']:3d}  val mAP {row['val_map']:.4f}  "
                  f"groups {row['num_groups']}", file=sys.stderr)

        result = trainer.run(history_sink=sink)

    checkpoint_save(out / "checkpoint_last.npz", result.state)
    checkpoint_save(out / "checkpoint_best.npz", result.best_state)
    if result.history:
        save_history_figure(result.history, out / "history.png")
        # full report of the best model under the validation protocol
        all_emb = result.best_model.embed(target.features)
        report = retrieval_eval(
            all_emb[trainer.val_indices], target.identities[trainer.val_indices],
            all_emb, target.identities,
            query_ids=trainer.val_indices, gallery_ids=np.arange(target.size),
        )
        best_row = next(r for r in result.history if r["epoch"] == result.best_epoch)
        report.neighbor_quality = PairQuality(
            best_row["neighbor_precision"], best_row["neighbor_recall"], best_row["neighbor_f1"])
        report.group_quality = PairQuality(
            best_row["group_precision"], best_row["group_recall"], best_row["group_f1"])
        write_metrics_json(report, out / "metrics.json")
        write_metrics_csv(report, out / "metrics.csv")

    if result.diverged:
        print("training diverged: non-finite loss; kept last finite checkpoint", file=sys.stderr)
        return 4
    print(f"run {manifest['run_id']}: best val mAP {result.best_map:.4f} "
          f"at epoch {result.best_epoch}")
    return 0


def _load_checkpoint_model(path):
    from .errors import DataError
    from .trainer import EmbeddingModel, checkpoint_load

    if not Path(path).exists():
        raise DataError(f"checkpoint {path} does not exist")
    state = checkpoint_load(path)
    model = EmbeddingModel(state["model"]["weight"], state["model"]["bias"])
    return state, model


def cmd_eval(args) -> int:
    import numpy as np

    from .dataio import load_dataset
    from .errors import DataError
    from .evalkit import retrieval_eval
    from .report import save_cmc_figure, write_metrics_csv, write_metrics_json

    state, model = _load_checkpoint_model(args.checkpoint)
    data = load_dataset(args.features, args.labels)
    if data.dim != state["d_in"]:
        raise DataError(f"dimension mismatch: checkpoint d={state['d_in']}, data d={data.dim}")

    emb = model.embed(data.features)
    ids = np.arange(data.size)
    report = retrieval_eval(emb, data.identities, emb, data.identities,
                            query_ids=ids, gallery_ids=ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(report, out / "report.json")
    write_metrics_csv(report, out / "report.csv")
    save_cmc_figure(report.cmc_curve, out / "cmc_curve.png")
    print(f"mAP {report.map:.4f}  rank-1 {report.cmc[1]:.4f}  "
          f"({report.num_queries} queries)")
    return 0


def cmd_labels(args) -> int:
    from .dataio import load_dataset, save_partition_csv
    from .embedding_store import MemoryBank
    from .errors import ConfigError, DataError
    from .evalkit import pair_quality
    from .group_builder import DbscanParams, MergePolicy, cosine_eps_heuristic, dbscan, merge_groups
    from .neighbor_predictor import GppLiteModel, NeighborMemory, candidates, predict_learned, predict_threshold
    from .report import save_group_size_figure
    from .trainer import DEFAULT_MU

    state, model = _load_checkpoint_model(args.checkpoint)
    data = load_dataset(args.features, args.labels)
    if data.dim != state["d_in"]:
        raise DataError(f"dimension mismatch: checkpoint d={state['d_in']}, data d={data.dim}")

    cfg = dict(state["config"])
    predictor = args.predictor or cfg["predictor"]
    mu = args.mu if args.mu is not None else (cfg["mu"] or DEFAULT_MU[predictor])
    k = args.k if args.k is not None else cfg["k_candidates"]
    policy_name = _POLICY_ALIASES.get(args.policy, cfg["policy"]) if args.policy else cfg["policy"]
    min_common = args.min_common if args.min_common is not None else cfg["min_common"]
    min_pts = args.dbscan_min_pts if args.dbscan_min_pts is not None else cfg["dbscan_min_pts"]
    percentile = (args.dbscan_eps_percentile if args.dbscan_eps_percentile is not None
                  else cfg["dbscan_eps_percentile"])

    gpp = GppLiteModel.from_state(state["gpp"])
    if predictor == "learned" and not gpp.ready:
        raise ConfigError("learned predictor requested but the checkpoint's predictor is untrained")

    bank = MemoryBank(model.embed(data.features), momentum=cfg["momentum"])
    memory = NeighborMemory(bank.size)
    k_eff = min(k, bank.size - 1)
    for i in range(bank.size):
        cand = candidates(bank, i, k_eff)
        if predictor == "learned":
            memory.record(predict_learned(gpp, cand, mu))
        else:
            memory.record(predict_threshold(cand, mu))

    eps = cosine_eps_heuristic(bank.vectors, percentile)
    cap = dbscan(bank, DbscanParams(eps, min_pts)).max_cluster_size
    partition = merge_groups(memory, cap, MergePolicy(policy_name, min_common=min_common))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_partition_csv(out / "partition.csv", data.sample_ids, partition.labels)
    save_group_size_figure([g.size for g in partition.groups], out / "group_sizes.png")

    summary = {
        "num_samples": int(bank.size),
        "num_groups": len(partition.groups),
        "group_cap": int(partition.cap),
        "predictor": predictor,
        "mu": float(mu),
        "k": int(k_eff),
        "policy": policy_name,
    }
    if data.identities is not None:
        nq = pair_quality(memory, data.identities)
        gq = pair_quality(partition, data.identities)
        summary.update({
            "neighbor_precision": nq.precision, "neighbor_recall": nq.recall, "neighbor_f1": nq.f1,
            "group_precision": gq.precision, "group_recall": gq.recall, "group_f1": gq.f1,
        })
    with open(out / "labels_report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{summary['num_groups']} groups over {summary['num_samples']} samples "
          f"(cap {summary['group_cap']})")
    return 0


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="complab",
        description="Pseudo-label domain adaptation experiments on embedding features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic source/target dataset pair")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--ids-source", type=int, default=50)
    p_synth.add_argument("--ids-target", type=int, default=50)
    p_synth.add_argument("--per-id", type=int, default=12)
    p_synth.add_argument("--cams", type=int, default=4)
    p_synth.add_argument("--d-in", type=int, default=64)
    p_synth.add_argument("--id-dim", type=int, default=None,
                         help="identity-subspace width (default d_in // 2)")
    p_synth.add_argument("--intra-sigma", type=float, default=0.11)
    p_synth.add_argument("--shift", type=float, default=0.6)
    p_synth.add_argument("--occl-rate", type=float, default=0.3)
    p_synth.add_argument("--occl-frac", type=float, default=0.28)
    p_synth.add_argument("--cam-sigma", type=float, default=0.25)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--format", choices=("text", "binary"), default="text")
    p_synth.set_defaults(func=cmd_synth)

    config_keys = (
        "e1, e2, epochs, p, k_per_label, lr, lr_drop_epoch, temperature, mu, "
        "momentum, margin, k_candidates, seed, predictor, policy, min_common, "
        "dbscan_min_pts, dbscan_eps_percentile, embed_dim, jitter_sigma, "
        "val_fraction, target_fraction, gpp_lr, use_neighbor, use_aggregation, "
        "use_target_triplet"
    )
    p_train = sub.add_parser(
        "train", help="run the staged joint training loop",
        epilog=f"config file keys (flat `key = value` lines): {config_keys}",
    )
    p_train.add_argument("--source-features", required=True)
    p_train.add_argument("--source-labels", required=True)
    p_train.add_argument("--target-features", required=True)
    p_train.add_argument("--target-labels", required=True,
                         help="ground truth used only by the evaluator (validation mAP)")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", help="flat key = value file; keys mirror TrainConfig")
    p_train.add_argument("--ablation", choices=("n", "ns", "nt", "nst", "st"),
                         help="loss-term preset: neighbor / similarity-aggregating / target triplet")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--e1", type=int)
    p_train.add_argument("--e2", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--temperature", type=float)
    p_train.add_argument("--momentum", type=float)
    p_train.add_argument("--jitter-sigma", type=float, dest="jitter_sigma")
    p_train.add_argument("--predictor", choices=("threshold", "learned"))
    p_train.add_argument("--mu", type=float)
    p_train.add_argument("--k", type=int, help="candidate neighbor count")
    p_train.add_argument("--policy", choices=("basic", "min-common", "vote"))
    p_train.add_argument("--min-common", type=int, dest="min_common")
    p_train.add_argument("--dbscan-minpts", type=int, dest="dbscan_min_pts")
    p_train.add_argument("--dbscan-eps-percentile", type=float, dest="dbscan_eps_percentile")
    p_train.add_argument("--target-fraction", type=float, dest="target_fraction")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="retrieval metrics of a checkpointed model")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--features", required=True)
    p_eval.add_argument("--labels", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_labels = sub.add_parser("labels", help="dump the group partition of a checkpointed model")
    p_labels.add_argument("--checkpoint", required=True)
    p_labels.add_argument("--features", required=True)
    p_labels.add_argument("--labels", help="optional ground truth; adds quality metrics")
    p_labels.add_argument("--out", required=True)
    p_labels.add_argument("--predictor", choices=("threshold", "learned"))
    p_labels.add_argument("--mu", type=float)
    p_labels.add_argument("--k", type=int)
    p_labels.add_argument("--policy", choices=("basic", "min-common", "vote"))
    p_labels.add_argument("--min-common", type=int, dest="min_common")
    p_labels.add_argument("--dbscan-minpts", type=int, dest="dbscan_min_pts")
    p_labels.add_argument("--dbscan-eps-percentile", type=float, dest="dbscan_eps_percentile")
    p_labels.set_defaults(func=cmd_labels)

    return parser


def main(argv=None) -> int:
    _cap_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import ConfigError, DataError, DivergenceError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
