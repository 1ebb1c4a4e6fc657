"""Staged joint training of the embedding model and the learned predictor.

Each epoch rebuilds groups from the neighbor memory, then iterates paired
source/target P*K mini-batches: source terms and the predictor objective run
from the start, the neighbor term joins after e1, the group terms after e2.
Bank entries of batch samples refresh after every optimizer step, and the
best model is retained by validation mAP.
"""

from __future__ import annotations

import json
import math
import zipfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import losses
from .dataio import Dataset
from .embedding_store import MemoryBank
from .errors import ConfigError, DataError
from .evalkit import pair_quality, retrieval_eval
from .group_builder import DbscanParams, MergePolicy, assign_labels, cosine_eps_heuristic, dbscan, merge_groups
from .losses import SoftmaxHead
from .neighbor_predictor import GppLiteModel, NeighborMemory, candidates, predict_learned, predict_threshold, train_gpp_step
from .optim import Adam

CHECKPOINT_VERSION = 1

PREDICTOR_THRESHOLD = "threshold"
PREDICTOR_LEARNED = "learned"
DEFAULT_MU = {PREDICTOR_THRESHOLD: 0.6, PREDICTOR_LEARNED: 0.5}

# ablation preset -> (neighbor, aggregation, target triplet)
ABLATIONS = {
    "n": (True, False, False),
    "ns": (True, True, False),
    "nt": (True, False, True),
    "nst": (True, True, True),
    "st": (False, True, True),
}


def _default_loss_weights() -> dict:
    return {name: 1.0 for name in losses.ALL_TERMS}


@dataclass
class TrainConfig:
    e1: int = 5
    e2: int = 10
    epochs: int = 70
    p: int = 8
    k_per_label: int = 4
    lr: float = 1.25e-4
    lr_drop_epoch: int = 40
    temperature: float = 0.05
    mu: float | None = None  # None -> predictor-mode default
    momentum: float = 0.5
    margin: float = 0.3
    k_candidates: int = 200
    seed: int = 0
    predictor: str = PREDICTOR_LEARNED
    policy: str = "basic"
    min_common: int = 2
    dbscan_min_pts: int = 4
    dbscan_eps_percentile: float = 1.6
    embed_dim: int | None = None
    jitter_sigma: float = 0.01
    val_fraction: float = 0.1
    target_fraction: float = 1.0
    gpp_lr: float = 0.05
    use_neighbor: bool = True
    use_aggregation: bool = True
    use_target_triplet: bool = True
    loss_weights: dict = field(default_factory=_default_loss_weights)

    def __post_init__(self):
        if not 0 <= self.e1 <= self.e2 <= self.epochs:
            raise ConfigError("need 0 <= e1 <= e2 <= epochs")
        if self.p < 2 or self.k_per_label < 2:
            raise ConfigError("P and K must both be at least 2")
        if self.lr <= 0 or self.temperature <= 0 or self.gpp_lr <= 0:
            raise ConfigError("lr, gpp_lr and temperature must be positive")
        if not 0.0 < self.momentum <= 1.0:
            raise ConfigError("momentum must lie in (0, 1]")
        if self.mu is not None and not 0.0 < self.mu < 1.0:
            raise ConfigError("mu must lie in (0, 1)")
        if self.predictor not in (PREDICTOR_THRESHOLD, PREDICTOR_LEARNED):
            raise ConfigError(f"unknown predictor {self.predictor!r}")
        if self.policy not in ("basic", "min_common", "two_epoch_vote"):
            raise ConfigError(f"unknown merge policy {self.policy!r}")
        if self.min_common < 1:
            raise ConfigError("min_common must be at least 1")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be at least 1")
        if not 0.0 < self.target_fraction <= 1.0:
            raise ConfigError("target_fraction must lie in (0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")

    @property
    def resolved_mu(self) -> float:
        return DEFAULT_MU[self.predictor] if self.mu is None else self.mu

    def with_ablation(self, preset: str) -> "TrainConfig":
        if preset not in ABLATIONS:
            raise ConfigError(f"unknown ablation preset {preset!r}; choose from {sorted(ABLATIONS)}")
        n, s, t = ABLATIONS[preset]
        return replace(self, use_neighbor=n, use_aggregation=s, use_target_triplet=t)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class EmbeddingModel:
    """Linear map followed by L2 normalization."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)

    @classmethod
    def create(cls, d_in: int, embed_dim: int | None = None,
               rng: np.random.Generator | None = None, use_bias: bool = False) -> "EmbeddingModel":
        """Identity init when the dimensions agree (embedding starts as the raw
        features), otherwise a seeded orthonormal projection."""
        d_out = d_in if embed_dim is None else embed_dim
        if d_out == d_in:
            w = np.eye(d_in)
        else:
            rng = rng or np.random.default_rng(0)
            a = rng.normal(size=(d_in, d_out)) if d_out <= d_in else rng.normal(size=(d_out, d_in)).T
            q, _ = np.linalg.qr(a)
            w = q.T if d_out <= d_in else q
            if w.shape != (d_out, d_in):
                w = w[:d_out, :d_in]
        bias = np.zeros(d_out) if use_bias else None
        return cls(w, bias)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = x @ self.weight.T
        if self.bias is not None:
            z = z + self.bias
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise FloatingPointError("embedding collapsed to zero norm")
        f = z / norms
        return f, (x, f, norms)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_f: np.ndarray) -> dict[str, np.ndarray]:
        x, f, norms = cache
        radial = np.sum(f * grad_f, axis=1, keepdims=True)
        gz = (grad_f - f * radial) / norms
        grads = {"weight": gz.T @ x}
        if self.bias is not None:
            grads["bias"] = gz.sum(axis=0)
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def pk_sample(labels, num_labels: int, num_per_label: int, rng: np.random.Generator) -> np.ndarray:
    """Batch indices: num_labels distinct labels, num_per_label members each,
    drawn with replacement only when a label has too few members."""
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < num_labels:
        raise ValueError(f"need at least {num_labels} distinct labels, got {uniq.size}")
    chosen = rng.choice(uniq, size=num_labels, replace=False)
    picks = []
    for lab in chosen:
        members = np.flatnonzero(labels == lab)
        picks.append(rng.choice(members, size=num_per_label, replace=members.size < num_per_label))
    return np.concatenate(picks)


@dataclass
class TrainResult:
    best_model: EmbeddingModel
    best_map: float
    best_epoch: int
    history: list[dict]
    bank: MemoryBank
    diverged: bool
    state: dict
    best_state: dict


class Trainer:
    """Owns all mutable training state; see run()."""

    def __init__(self, source: Dataset, target: Dataset, config: TrainConfig):
        if source.identities is None:
            raise DataError("source dataset needs identity labels")
        if target.identities is None:
            raise DataError("target dataset needs hidden identity labels (evaluator-only)")
        if source.dim != target.dim:
            raise DataError(f"dimension mismatch: source d={source.dim}, target d={target.dim}")
        self.source = source
        self.target = target
        self.cfg = config

        # contiguous class ids for the source head
        _, self.src_labels = np.unique(source.identities, return_inverse=True)
        self.num_classes = int(self.src_labels.max()) + 1
        if self.num_classes < config.p:
            raise DataError(f"source has {self.num_classes} identities, P={config.p} needs more")

        split_ss, train_ss = np.random.SeedSequence(config.seed).spawn(2)
        split_rng = np.random.default_rng(split_ss)
        self.rng = np.random.default_rng(train_ss)

        n_t = target.size
        n_val = int(round(config.val_fraction * n_t))
        perm = split_rng.permutation(n_t)
        self.val_indices = np.sort(perm[:n_val])
        pool = np.sort(perm[n_val:])
        n_keep = max(int(math.ceil(config.target_fraction * pool.size)), config.p)
        self.train_indices = np.sort(split_rng.choice(pool, size=min(n_keep, pool.size), replace=False))
        self.n_train = self.train_indices.size

        self.model = EmbeddingModel.create(source.dim, config.embed_dim, self.rng)
        self.head = SoftmaxHead.zeros(self.num_classes, self.model.d_out)
        self.gpp = GppLiteModel(config.gpp_lr)
        self.opt = Adam(config.lr)

        # bank seeded from the model's forward pass over the adaptation samples
        self.bank = MemoryBank(self.model.embed(target.features[self.train_indices]), config.momentum)
        self.memory = NeighborMemory(self.n_train, retain_previous=(config.policy == "two_epoch_vote"))
        self.group_labels = np.arange(self.n_train, dtype=np.intp)
        self.merge_policy = MergePolicy(config.policy, min_common=config.min_common)

        self.epoch = 0
        self.history: list[dict] = []
        self.diverged = False
        self.best_map = -1.0
        self.best_epoch = 0
        self.best_snapshot: dict | None = None
        self.cap = self.n_train

    # ------------------------------------------------------------------ epochs

    def _rebuild_groups(self) -> int:
        eps = cosine_eps_heuristic(self.bank.vectors, self.cfg.dbscan_eps_percentile)
        result = dbscan(self.bank, DbscanParams(eps, self.cfg.dbscan_min_pts))
        self.cap = result.max_cluster_size
        partition = merge_groups(self.memory, self.cap, self.merge_policy)
        self.group_labels = assign_labels(partition)
        self._group_members = partition.groups
        return len(partition.groups)

    def _current_lr(self, epoch: int) -> float:
        return self.cfg.lr * (0.1 if epoch > self.cfg.lr_drop_epoch else 1.0)

    def _predict_neighbors(self, cand):
        if self.cfg.predictor == PREDICTOR_LEARNED:
            return predict_learned(self.gpp, cand, self.cfg.resolved_mu)
        return predict_threshold(cand, self.cfg.resolved_mu)

    def _iterate(self, epoch: int, term_sums, grad_norm_sums) -> bool:
        """One mini-batch step. Returns False on divergence."""
        cfg = self.cfg
        w = cfg.loss_weights
        batch = cfg.p * cfg.k_per_label

        src_idx = pk_sample(self.src_labels, cfg.p, cfg.k_per_label, self.rng)
        p_eff = min(cfg.p, int(np.unique(self.group_labels).size))
        tgt_idx = pk_sample(self.group_labels, p_eff, cfg.k_per_label, self.rng)

        xs = self.source.features[src_idx]
        xt = self.target.features[self.train_indices[tgt_idx]]
        if cfg.jitter_sigma > 0:
            xs = xs + cfg.jitter_sigma * self.rng.normal(size=xs.shape)
            xt = xt + cfg.jitter_sigma * self.rng.normal(size=xt.shape)

        fs, cache_s = self.model.forward(xs)
        ft, cache_t = self.model.forward(xt)
        ys = self.src_labels[src_idx]

        terms: dict[str, float] = {}
        g_fs = np.zeros_like(fs)
        g_ft = np.zeros_like(ft)

        head_res = self.head.loss(fs, ys)
        terms[losses.TERM_SOFTMAX_SRC] = head_res.value
        g_fs += w[losses.TERM_SOFTMAX_SRC] * head_res.grad

        trip_s = losses.batch_hard_triplet(fs, ys, cfg.margin)
        terms[losses.TERM_TRIPLET_SRC] = trip_s.value
        g_fs += w[losses.TERM_TRIPLET_SRC] * trip_s.grad

        # predictor objective: own optimizer, never touches the embedding model
        terms[losses.TERM_GPP] = train_gpp_step(self.gpp, fs, ys)

        neighbor_grad_norm = 0.0
        aggre_grad_norm = 0.0
        if epoch > cfg.e1:
            sims_t = ft @ self.bank.vectors.T
            k_eff = min(cfg.k_candidates, self.n_train - 1)
            n_slots = tgt_idx.size
            neigh_sum = 0.0
            aggre_sum = 0.0
            for s, i in enumerate(tgt_idx):
                i = int(i)
                cand = candidates(self.bank, i, k_eff, query=ft[s])
                omega = self._predict_neighbors(cand)
                self.memory.record(omega)
                if cfg.use_neighbor:
                    res = losses.neighbor_loss(ft[s], omega.members, i, self.bank,
                                               cfg.temperature, sims=sims_t[s])
                    neigh_sum += res.value
                    contrib = (w[losses.TERM_NEIGHBOR] / n_slots) * res.grad
                    g_ft[s] += contrib
                    neighbor_grad_norm += float(np.linalg.norm(contrib))
                if epoch > cfg.e2 and cfg.use_aggregation:
                    members = self._group_members[self.group_labels[i]]
                    res = losses.aggregation_loss(ft[s], members, i, self.bank,
                                                  cfg.temperature, sims=sims_t[s])
                    aggre_sum += res.value
                    if res.active:
                        contrib = (w[losses.TERM_AGGREGATION] / n_slots) * res.grad
                        g_ft[s] += contrib
                        aggre_grad_norm += float(np.linalg.norm(contrib))
            if cfg.use_neighbor:
                terms[losses.TERM_NEIGHBOR] = neigh_sum / n_slots
            if epoch > cfg.e2 and cfg.use_aggregation:
                terms[losses.TERM_AGGREGATION] = aggre_sum / n_slots

        if epoch > cfg.e2 and cfg.use_target_triplet:
            trip_t = losses.batch_hard_triplet(ft, self.group_labels[tgt_idx], cfg.margin)
            terms[losses.TERM_TRIPLET_TGT] = trip_t.value
            g_ft += w[losses.TERM_TRIPLET_TGT] * trip_t.grad

        total = losses.total_loss(terms, epoch, cfg.e1, cfg.e2)
        if not np.isfinite(total):
            return False

        grads = self.model.backward(cache_s, g_fs)
        if np.any(g_ft):
            for k, v in self.model.backward(cache_t, g_ft).items():
                grads[k] = grads[k] + v
        params = dict(self.model.params())
        params["head_weights"] = self.head.weights
        params["head_bias"] = self.head.bias
        grads["head_weights"] = w[losses.TERM_SOFTMAX_SRC] * head_res.grad_weights
        grads["head_bias"] = w[losses.TERM_SOFTMAX_SRC] * head_res.grad_bias
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            return False
        self.opt.step(params, grads)

        # refresh bank entries of the samples just seen, clean features, post-step
        uniq = np.unique(tgt_idx)
        clean = self.model.embed(self.target.features[self.train_indices[uniq]])
        for j, i in enumerate(uniq):
            self.bank.update(int(i), clean[j])

        for name, value in terms.items():
            term_sums[name] += value
        grad_norm_sums[losses.TERM_NEIGHBOR] += neighbor_grad_norm
        grad_norm_sums[losses.TERM_AGGREGATION] += aggre_grad_norm
        grad_norm_sums[losses.TERM_SOFTMAX_SRC] += float(np.linalg.norm(head_res.grad))
        grad_norm_sums[losses.TERM_TRIPLET_SRC] += float(np.linalg.norm(trip_s.grad))
        return True

    def _evaluate(self) -> dict:
        all_emb = self.model.embed(self.target.features)
        truth = self.target.identities
        all_ids = np.arange(self.target.size)
        report = retrieval_eval(
            all_emb[self.val_indices], truth[self.val_indices], all_emb, truth,
            query_ids=self.val_indices, gallery_ids=all_ids,
        )
        train_truth = truth[self.train_indices]
        nq = pair_quality(self.memory, train_truth)
        gq = pair_quality(self.group_labels, train_truth)
        return {
            "val_map": float(report.map),
            "cmc": {str(k): float(v) for k, v in report.cmc.items()},
            "neighbor_precision": nq.precision,
            "neighbor_recall": nq.recall,
            "neighbor_f1": nq.f1,
            "group_precision": gq.precision,
            "group_recall": gq.recall,
            "group_f1": gq.f1,
        }

    def run(self, history_sink=None) -> TrainResult:
        cfg = self.cfg
        iterations = max(1, math.ceil(self.n_train / (cfg.p * cfg.k_per_label)))
        for epoch in range(self.epoch + 1, cfg.epochs + 1):
            self.epoch = epoch
            self.opt.lr = self._current_lr(epoch)
            num_groups = self._rebuild_groups()
            self.memory.start_epoch()

            term_sums: dict[str, float] = defaultdict(float)
            grad_norm_sums: dict[str, float] = defaultdict(float)
            ok = True
            for _ in range(iterations):
                if not self._iterate(epoch, term_sums, grad_norm_sums):
                    ok = False
                    break
            if not ok:
                self.diverged = True
                break

            row = {
                "epoch": epoch,
                "lr": self.opt.lr,
                "num_groups": num_groups,
                "group_cap": int(self.cap),
                "terms": {k: v / iterations for k, v in sorted(term_sums.items())},
                "grad_norms": {k: v / iterations for k, v in sorted(grad_norm_sums.items())},
            }
            row.update(self._evaluate())
            self.history.append(row)
            if history_sink is not None:
                history_sink(row)

            if row["val_map"] > self.best_map:
                self.best_map = row["val_map"]
                self.best_epoch = epoch
                self.best_snapshot = self._snapshot()

        if self.best_snapshot is None:  # divergence before the first evaluation
            self.best_snapshot = self._snapshot()
            self.best_epoch = self.epoch
            self.best_map = float("nan")
        best_state = self.checkpoint_state(best_as_current=True)
        best_model = EmbeddingModel(
            self.best_snapshot["weight"],
            self.best_snapshot.get("bias"),
        )
        return TrainResult(
            best_model=best_model,
            best_map=self.best_map,
            best_epoch=self.best_epoch,
            history=self.history,
            bank=self.bank,
            diverged=self.diverged,
            state=self.checkpoint_state(),
            best_state=best_state,
        )

    # ------------------------------------------------------------- checkpoints

    def _snapshot(self) -> dict:
        snap = {
            "weight": self.model.weight.copy(),
            "bank_vectors": self.bank.vectors.copy(),
            "gpp": self.gpp.state_dict(),
        }
        if self.model.bias is not None:
            snap["bias"] = self.model.bias.copy()
        return snap

    def checkpoint_state(self, best_as_current: bool = False) -> dict:
        """Everything needed to continue (or evaluate) this run exactly."""
        if best_as_current and self.best_snapshot is not None:
            weight = self.best_snapshot["weight"].copy()
            bias = self.best_snapshot.get("bias")
            bank_vectors = self.best_snapshot["bank_vectors"].copy()
            gpp_state = self.best_snapshot["gpp"]
        else:
            weight = self.model.weight.copy()
            bias = None if self.model.bias is None else self.model.bias.copy()
            bank_vectors = self.bank.vectors.copy()
            gpp_state = self.gpp.state_dict()
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "d_in": self.source.dim,
            "rng_state": self.rng.bit_generator.state,
            "model": {"weight": weight, "bias": bias},
            "head": {"weights": self.head.weights.copy(), "bias": self.head.bias.copy()},
            "gpp": gpp_state,
            "bank": {"vectors": bank_vectors, "momentum": self.bank.momentum},
            "opt": self.opt.state_dict(),
            "memory": {
                "members": [m.copy() for m in self.memory.members],
                "scores": [s.copy() for s in self.memory.scores],
                "prev_members": None if self.memory.prev_members is None
                else [m.copy() for m in self.memory.prev_members],
                "prev_scores": None if self.memory.prev_scores is None
                else [s.copy() for s in self.memory.prev_scores],
                "retain": self.memory.retain_previous,
            },
            "group_labels": self.group_labels.copy(),
            "val_indices": self.val_indices.copy(),
            "train_indices": self.train_indices.copy(),
            "best": {"epoch": self.best_epoch, "map": self.best_map},
            "diverged": self.diverged,
        }

    @classmethod
    def from_checkpoint(cls, source: Dataset, target: Dataset, state: dict) -> "Trainer":
        cfg = TrainConfig.from_dict(state["config"])
        if source.dim != state["d_in"] or target.dim != state["d_in"]:
            raise DataError(
                f"dimension mismatch: checkpoint expects d={state['d_in']}, "
                f"got source d={source.dim}, target d={target.dim}"
            )
        trainer = cls(source, target, cfg)
        trainer.epoch = int(state["epoch"])
        trainer.rng.bit_generator.state = state["rng_state"]
        trainer.model = EmbeddingModel(state["model"]["weight"], state["model"]["bias"])
        trainer.head = SoftmaxHead(state["head"]["weights"], state["head"]["bias"])
        trainer.gpp = GppLiteModel.from_state(state["gpp"])
        trainer.bank = MemoryBank.from_unit_rows(state["bank"]["vectors"], state["bank"]["momentum"])
        trainer.opt = Adam.from_state(state["opt"])
        mem = state["memory"]
        trainer.memory = NeighborMemory(len(mem["members"]), retain_previous=mem["retain"])
        trainer.memory.members = [np.asarray(m, dtype=np.intp) for m in mem["members"]]
        trainer.memory.scores = [np.asarray(s, dtype=np.float64) for s in mem["scores"]]
        if mem["prev_members"] is not None:
            trainer.memory.prev_members = [np.asarray(m, dtype=np.intp) for m in mem["prev_members"]]
            trainer.memory.prev_scores = [np.asarray(s, dtype=np.float64) for s in mem["prev_scores"]]
        trainer.group_labels = np.asarray(state["group_labels"], dtype=np.intp)
        trainer.val_indices = np.asarray(state["val_indices"], dtype=np.intp)
        trainer.train_indices = np.asarray(state["train_indices"], dtype=np.intp)
        trainer.n_train = trainer.train_indices.size
        trainer.best_map = float(state["best"]["map"])
        trainer.best_epoch = int(state["best"]["epoch"])
        trainer.diverged = bool(state.get("diverged", False))
        return trainer


def run(source: Dataset, target: Dataset, config: TrainConfig, history_sink=None) -> TrainResult:
    """Train from scratch; see Trainer."""
    return Trainer(source, target, config).run(history_sink)


# ---------------------------------------------------------------- file format


def _pack_ragged(arrays: list[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    for i, a in enumerate(arrays):
        offsets[i + 1] = offsets[i] + len(a)
    flat = np.concatenate(arrays) if arrays else np.zeros(0, dtype=dtype)
    return flat.astype(dtype), offsets


def _unpack_ragged(flat: np.ndarray, offsets: np.ndarray) -> list[np.ndarray]:
    return [flat[offsets[i]:offsets[i + 1]].copy() for i in range(len(offsets) - 1)]


def checkpoint_save(path, state: dict) -> None:
    arrays = {
        "model_weight": state["model"]["weight"],
        "head_weights": state["head"]["weights"],
        "head_bias": state["head"]["bias"],
        "bank_vectors": state["bank"]["vectors"],
        "group_labels": state["group_labels"],
        "val_indices": state["val_indices"],
        "train_indices": state["train_indices"],
    }
    if state["model"]["bias"] is not None:
        arrays["model_bias"] = state["model"]["bias"]
    mem = state["memory"]
    arrays["mem_members"], arrays["mem_offsets"] = _pack_ragged(mem["members"], np.int64)
    arrays["mem_scores"], _ = _pack_ragged(mem["scores"], np.float64)
    has_prev = mem["prev_members"] is not None
    if has_prev:
        arrays["memp_members"], arrays["memp_offsets"] = _pack_ragged(mem["prev_members"], np.int64)
        arrays["memp_scores"], _ = _pack_ragged(mem["prev_scores"], np.float64)
    opt = state["opt"]
    for k, v in opt["m"].items():
        arrays[f"opt_m_{k}"] = v
    for k, v in opt["v"].items():
        arrays[f"opt_v_{k}"] = v

    gpp = state["gpp"]
    meta = {
        "version": state["version"],
        "config": state["config"],
        "epoch": state["epoch"],
        "d_in": state["d_in"],
        "rng_state": state["rng_state"],
        "bank_momentum": state["bank"]["momentum"],
        "has_model_bias": state["model"]["bias"] is not None,
        "mem_retain": mem["retain"],
        "mem_has_prev": has_prev,
        "opt_scalars": {k: opt[k] for k in ("lr", "beta1", "beta2", "eps", "t")},
        "opt_keys": sorted(opt["m"]),
        "gpp": {
            "w": [float(x) for x in gpp["w"]],
            "b": gpp["b"],
            "steps": gpp["steps"],
            "opt": {
                **{k: gpp["opt"][k] for k in ("lr", "beta1", "beta2", "eps", "t")},
                "m": {k: [float(x) for x in v] for k, v in gpp["opt"]["m"].items()},
                "v": {k: [float(x) for x in v] for k, v in gpp["opt"]["v"].items()},
            },
        },
        "best": state["best"],
        "diverged": state["diverged"],
    }
    with open(path, "wb") as fh:  # file handle keeps the exact path (no .npz suffixing)
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def checkpoint_load(path) -> dict:
    try:
        with np.load(path) as data:
            payload = {k: data[k] for k in data.files}
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise DataError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    try:
        meta = json.loads(bytes(payload["meta"]).decode())
    except (KeyError, ValueError) as exc:
        raise DataError(f"corrupt checkpoint metadata in {path}: {exc}") from exc
    if meta["version"] != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint version {meta['version']} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        opt_state = dict(meta["opt_scalars"])
        opt_state["m"] = {k: payload[f"opt_m_{k}"] for k in meta["opt_keys"]}
        opt_state["v"] = {k: payload[f"opt_v_{k}"] for k in meta["opt_keys"]}
        gpp = meta["gpp"]
        gpp_state = {
            "w": np.asarray(gpp["w"], dtype=np.float64),
            "b": gpp["b"],
            "steps": gpp["steps"],
            "opt": {
                **{k: gpp["opt"][k] for k in ("lr", "beta1", "beta2", "eps", "t")},
                "m": {k: np.asarray(v, dtype=np.float64) for k, v in gpp["opt"]["m"].items()},
                "v": {k: np.asarray(v, dtype=np.float64) for k, v in gpp["opt"]["v"].items()},
            },
        }
        members = _unpack_ragged(payload["mem_members"].astype(np.intp), payload["mem_offsets"])
        score_offsets = payload["mem_offsets"]
        scores = _unpack_ragged(payload["mem_scores"], score_offsets)
        prev_members = prev_scores = None
        if meta["mem_has_prev"]:
            prev_members = _unpack_ragged(payload["memp_members"].astype(np.intp), payload["memp_offsets"])
            prev_scores = _unpack_ragged(payload["memp_scores"], payload["memp_offsets"])
        return {
            "version": meta["version"],
            "config": meta["config"],
            "epoch": meta["epoch"],
            "d_in": meta["d_in"],
            "rng_state": meta["rng_state"],
            "model": {
                "weight": payload["model_weight"],
                "bias": payload["model_bias"] if meta["has_model_bias"] else None,
            },
            "head": {"weights": payload["head_weights"], "bias": payload["head_bias"]},
            "gpp": gpp_state,
            "bank": {"vectors": payload["bank_vectors"], "momentum": meta["bank_momentum"]},
            "opt": opt_state,
            "memory": {
                "members": members,
                "scores": scores,
                "prev_members": prev_members,
                "prev_scores": prev_scores,
                "retain": meta["mem_retain"],
            },
            "group_labels": payload["group_labels"],
            "val_indices": payload["val_indices"],
            "train_indices": payload["train_indices"],
            "best": meta["best"],
            "diverged": meta["diverged"],
        }
    except KeyError as exc:
        raise DataError(f"checkpoint {path} is missing field {exc}") from exc
