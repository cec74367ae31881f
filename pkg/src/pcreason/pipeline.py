"""End-to-end model bundle, corpus IO, training loop, and evaluation.

The ``Model`` owns one flat parameter dict spanning both sensory encoders,
the cross-modal fusion block, the causal decoder, and the anchor projection
heads, so a single optimizer instance updates everything.

Evaluation modes:
  explicit -- decode rationale first, then the answer conditioned on it.
  implicit -- decode the answer directly; the model's latent geometric
              beliefs are then read out with a forced-choice assertion
              probe at the rationale-start position.
  direct   -- same decode and probe path as implicit, but meant for
              checkpoints trained without rationale supervision
              (``train_mode="direct"``).

The hallucination rate is measured on the decoded (explicit) or probed
(implicit/direct) rationales in all three modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import datagen, encoders, evalverify, fusion, geometry, objectives, reasoner
from .autodiff import Rng, Tensor, concat, finite_diff_check, no_grad
from .config import RunConfig
from .encoders import EncoderConfig
from .objectives import LossConfig, LossParts, SgdMomentum
from .reasoner import (
    ANSWER,
    END_THINK,
    EOS,
    THINK,
    LmConfig,
    ReasoningTrace,
    Vocab,
)

EVAL_MODES = ("direct", "implicit", "explicit")


class PipelineError(RuntimeError):
    pass


class TrainingAborted(PipelineError):
    pass


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        feature_dim=cfg.feature_dim,
        n_geo_tokens=cfg.n_geo_tokens,
        knn_k=cfg.knn_k,
        patch_grid=cfg.patch_grid,
        pos_bands=cfg.pos_bands,
        hidden=cfg.enc_hidden,
    )


def lm_config(cfg: RunConfig, vocab_size: int) -> LmConfig:
    return LmConfig(
        d_llm=cfg.d_llm,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        context=cfg.context,
        vocab_size=vocab_size,
    )


class Model:
    """All learnable parameters plus the fixed camera rig and vocab."""

    def __init__(self, cfg: RunConfig, vocab: Vocab, rng: Rng):
        self.cfg = cfg
        self.vocab = vocab
        self.enc_cfg = encoder_config(cfg)
        self.lm_cfg = lm_config(cfg, len(vocab))
        self.rig = geometry.build_spherical_rig(
            cfg.cam_radius, cfg.fov_deg, cfg.image_size
        )
        self.params: dict[str, Tensor] = {}
        self.params.update(encoders.init_point_encoder_params(rng.spawn(1), self.enc_cfg))
        self.params.update(
            encoders.init_view_encoder_params(rng.spawn(2), self.enc_cfg, cfg.image_size)
        )
        self.params.update(
            fusion.init_fusion_params(
                rng.spawn(3), cfg.feature_dim, cfg.l_bands, cfg.d_llm,
                hidden=cfg.enc_hidden,
            )
        )
        self.params.update(reasoner.init_lm_params(rng.spawn(4), self.lm_cfg))
        self.params.update(
            objectives.init_anchor_heads(
                rng.spawn(5), cfg.d_llm, cfg.feature_dim, cfg.proj_dim,
                hidden=cfg.enc_hidden,
            )
        )

    # -- forward ------------------------------------------------------------

    def sensory(self, cloud: geometry.PointCloud, views: np.ndarray):
        geo = encoders.encode_points(cloud, self.params, self.enc_cfg)
        vis = encoders.encode_views(views, self.params, self.enc_cfg)
        attended, _ = fusion.gcma_attend(
            geo, vis, self.rig, self.params, self.cfg.l_bands
        )
        h_sensory = fusion.occlusion_gate_fuse(geo, attended, self.params)
        return geo, h_sensory

    def manifold(
        self, cloud: geometry.PointCloud, views: np.ndarray, question_ids
    ) -> fusion.FusedManifold:
        geo, h_sensory = self.sensory(cloud, views)
        return fusion.assemble_manifold(
            h_sensory, question_ids, self.params["lm_embed"], self.params,
            geo.features,
        )

    def save(self, path) -> None:
        reasoner.save_checkpoint(
            self.params, {"config": self.cfg.to_dict()}, path
        )

    @staticmethod
    def load(path, vocab: Vocab) -> "Model":
        params, meta = reasoner.load_checkpoint(path)
        cfg = RunConfig.from_dict(meta["config"])
        model = Model(cfg, vocab, Rng(0))
        if set(params) != set(model.params):
            raise PipelineError("checkpoint parameter names do not match model")
        model.params = params
        return model


# -- targets ----------------------------------------------------------------


@dataclass
class Target:
    ids: list[int]
    gen_span: tuple[int, int] | None  # covers <think> R </think>
    pred_span: tuple[int, int]  # covers <answer> A <eos>
    rationale_positions: tuple[int, int]  # hidden-state rows for the anchor


def build_target(record: datagen.DatasetRecord, vocab: Vocab, mode: str) -> Target:
    answer_ids = vocab.tokenize(record.answer)
    if mode == "direct":
        ids = [ANSWER] + answer_ids + [EOS]
        return Target(ids, None, (0, len(ids)), (0, 0))
    rationale_ids = vocab.tokenize(record.rationale)
    ids = [THINK] + rationale_ids + [END_THINK, ANSWER] + answer_ids + [EOS]
    boundary = len(rationale_ids) + 2
    return Target(
        ids,
        (0, boundary),
        (boundary, len(ids)),
        (1, 1 + len(rationale_ids)),
    )


# -- corpus IO --------------------------------------------------------------


@dataclass
class Corpus:
    root: Path
    records: list
    metas: dict  # object_id -> ObjectMetadata
    manifest: datagen.SplitManifest
    vocab: Vocab

    def records_for(self, split: str) -> list:
        ids = set(getattr(self.manifest, split))
        return [r for r in self.records if r.object_id in ids]

    def load_cloud(self, record) -> geometry.PointCloud:
        return geometry.load_point_cloud(
            self.root / record.points_path, object_id=record.object_id
        )

    def load_views(self, record) -> np.ndarray:
        return encoders.load_views(self.root / record.views_path)


def generate_corpus(cfg: RunConfig, out_dir) -> dict:
    """Write clouds, view images, metadata, records, manifest, and vocab."""
    out = Path(out_dir)
    for sub in ("points", "views"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed)
    rig = geometry.build_spherical_rig(cfg.cam_radius, cfg.fov_deg, cfg.image_size)
    records = []
    metas = {}
    counts_per_level = {1: 0, 2: 0, 3: 0}
    for i in range(cfg.objects):
        family = datagen.FAMILIES[i % len(datagen.FAMILIES)]
        object_id = f"{family}-{i:05d}"
        obj_rng = rng.spawn(i)
        cloud, meta = datagen.generate_object(
            family, obj_rng, cfg.n_points, object_id
        )
        points_path = f"points/{object_id}.pts"
        views_path = f"views/{object_id}.views"
        geometry.save_point_cloud(cloud, out / points_path)
        encoders.save_views(encoders.render_splat_views(cloud, rig), out / views_path)
        metas[object_id] = meta
        for level in (1, 2, 3):
            try:
                record = datagen.generate_qa(meta, level, obj_rng)
            except datagen.TemplateUnsatisfiable:
                continue
            record.points_path = points_path
            record.views_path = views_path
            records.append(record)
            counts_per_level[level] += 1
    manifest = datagen.split_objects(
        sorted(metas),
        ratios=(cfg.train_ratio, cfg.val_ratio, cfg.test_ratio),
        seed=cfg.seed,
    )
    with open(out / "records.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json()) + "\n")
    (out / "metadata.json").write_text(
        json.dumps({oid: m.to_json() for oid, m in sorted(metas.items())}, indent=2)
    )
    datagen.save_manifest(manifest, out / "manifest.json")
    vocab = Vocab(datagen.build_lexicon())
    vocab.save(out / "vocab.json")
    return {
        "objects": len(metas),
        "records": len(records),
        "per_level": counts_per_level,
        "splits": {
            "train": len(manifest.train),
            "val": len(manifest.val),
            "test": len(manifest.test),
        },
    }


def load_corpus(root) -> Corpus:
    root = Path(root)
    records = [
        datagen.DatasetRecord(**json.loads(line))
        for line in (root / "records.jsonl").read_text().splitlines()
        if line.strip()
    ]
    metas = {
        oid: datagen.ObjectMetadata.from_json(m)
        for oid, m in json.loads((root / "metadata.json").read_text()).items()
    }
    manifest = datagen.load_manifest(root / "manifest.json")
    vocab = Vocab.load(root / "vocab.json")
    return Corpus(root=root, records=records, metas=metas, manifest=manifest, vocab=vocab)


# -- training ---------------------------------------------------------------


class _SampleCache:
    """Per-object cloud/view cache; corpus files are read once."""

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._clouds: dict = {}
        self._views: dict = {}

    def get(self, record):
        oid = record.object_id
        if oid not in self._clouds:
            self._clouds[oid] = self.corpus.load_cloud(record)
            self._views[oid] = self.corpus.load_views(record)
        return self._clouds[oid], self._views[oid]


def _element_losses(model: Model, record, cloud, views, target: Target):
    question_ids = model.vocab.tokenize(record.question)
    manifold = model.manifold(cloud, views, question_ids)
    logits, hidden = reasoner.forward_causal(
        manifold, target.ids, model.params, model.lm_cfg
    )
    pooled = manifold.geo_features.mean(axis=0)
    return logits, hidden, pooled


def train_model(
    model: Model,
    corpus: Corpus,
    steps: int,
    stage: int,
    seed: int,
    train_mode: str = "cot",
    optimizer: SgdMomentum | None = None,
    log_path=None,
    log_every: int = 25,
) -> SgdMomentum:
    """Run ``steps`` optimizer steps of the given stage over the train split.

    ``train_mode="direct"`` drops rationale supervision entirely (answer-only
    targets); otherwise stage 1 truncates answer gradients and stage 2 trains
    the full objective. Returns the optimizer so stage 2 can resume stage-1
    momentum. Aborts on a non-finite loss.
    """
    cfg = model.cfg
    records = corpus.records_for("train")
    if not records:
        raise PipelineError("empty train split")
    cache = _SampleCache(corpus)
    rng = Rng(seed).spawn(1000 + stage)
    if optimizer is None:
        optimizer = SgdMomentum(model.params, lr=cfg.lr, momentum=cfg.momentum)
    loss_cfg = LossConfig(
        lam=cfg.lam, alpha=cfg.alpha, tau=cfg.tau, proj_dim=cfg.proj_dim, stage=stage
    )
    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(steps):
            batch_idx = [
                int(rng.integers(0, len(records)))
                for _ in range(min(cfg.batch_size, len(records)))
            ]
            batch = [records[i] for i in batch_idx]
            elements = []
            for record in batch:
                cloud, views = cache.get(record)
                target = build_target(record, model.vocab, train_mode)
                logits, hidden, pooled = _element_losses(
                    model, record, cloud, views, target
                )
                elements.append((record, target, logits, hidden, pooled))

            totals = []
            parts_log = {"gen": [], "pred": [], "anchor": []}
            for i, (record, target, logits, hidden, pooled) in enumerate(elements):
                pred = objectives.loss_pred(logits, target.ids, target.pred_span)
                if train_mode == "direct":
                    totals.append(pred)
                    parts_log["pred"].append(pred.item())
                    continue
                gen = objectives.loss_gen(logits, target.ids, target.gen_span)
                negs = [
                    e[4].reshape(1, -1) for j, e in enumerate(elements) if j != i
                ]
                lo, hi = target.rationale_positions
                anchor = objectives.loss_anchor(
                    hidden[lo:hi], pooled, concat(negs, axis=0),
                    model.params, cfg.tau,
                )
                if stage == 1:
                    # strict truncation: the answer objective must contribute
                    # zero gradient in stage 1
                    totals.append(
                        objectives.loss_total(
                            LossParts(gen, pred.detach(), anchor), loss_cfg
                        )
                    )
                else:
                    totals.append(
                        objectives.loss_total(LossParts(gen, pred, anchor), loss_cfg)
                    )
                parts_log["gen"].append(gen.item())
                parts_log["pred"].append(pred.item())
                parts_log["anchor"].append(anchor.item())

            total = sum(totals[1:], totals[0]) * (1.0 / len(totals))
            if not np.isfinite(total.item()):
                raise TrainingAborted(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            if log_fh and (step % log_every == 0 or step == steps - 1):
                entry = {
                    "step": step,
                    "stage": stage,
                    "mode": train_mode,
                    "total": total.item(),
                    "pred_detached": train_mode != "direct" and stage == 1,
                }
                for key, vals in parts_log.items():
                    entry[key] = float(np.mean(vals)) if vals else None
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return optimizer


# -- evaluation -------------------------------------------------------------

# Forced-choice assertion slots for the rationale-free probe. Each slot lists
# mutually exclusive assertion tokens; the probe picks the one the model
# scores highest at the rationale-start position. Slots that are unverifiable
# for an object (no such part) drop out of the hallucination rate downstream.
_PROBE_SLOTS = [
    [f"count(leg)={n}" for n in range(7)],
    [f"count(armrest)={n}" for n in range(3)],
    ["property(stable)=true", "property(stable)=false"],
    ["property(symmetric)=true", "property(symmetric)=false"],
]


def assertion_probe(model: Model, manifold: fusion.FusedManifold) -> str:
    """Probe the model's geometric beliefs without decoding a rationale.

    One forward pass scores the token that would follow ``<think>``; each
    slot contributes its argmax candidate among the slot tokens present in
    the vocabulary. Returns the chosen assertions as a space-joined
    rationale string."""
    with no_grad():
        logits, _ = reasoner.next_token_state(
            manifold, [THINK], model.params, model.lm_cfg
        )
    scores = logits.data[0]
    chosen = []
    for slot in _PROBE_SLOTS:
        cands = [
            (tok, i) for tok in slot
            if (i := model.vocab.tokenize(tok)[0]) != reasoner.UNK
        ]
        if len(cands) < 2:
            continue
        ids = [i for _, i in cands]
        chosen.append(cands[int(np.argmax(scores[ids]))][0])
    return " ".join(chosen)


def evaluate(
    model: Model, corpus: Corpus, split: str = "test", mode: str = "explicit"
) -> evalverify.EvalReport:
    if mode not in EVAL_MODES:
        raise PipelineError(f"unknown eval mode: {mode}")
    records = corpus.records_for(split)
    if not records:
        raise PipelineError(f"empty split: {split}")
    cache = _SampleCache(corpus)
    rows = []
    for record in records:
        cloud, views = cache.get(record)
        question_ids = model.vocab.tokenize(record.question)
        manifold = model.manifold(cloud, views, question_ids)
        if mode == "explicit":
            trace = reasoner.decode_look_think_answer(
                manifold, model.params, model.lm_cfg, model.cfg.max_decode_len
            )
            answer = model.vocab.detokenize(trace.answer_ids)
            rationale = model.vocab.detokenize(trace.rationale_ids)
            em = trace.complete and evalverify.exact_match(answer, record.answer)
        else:
            answer_ids, emitted = reasoner.decode_answer_direct(
                manifold, model.params, model.lm_cfg
            )
            answer = model.vocab.detokenize(answer_ids)
            em = evalverify.exact_match(answer, record.answer)
            rationale = assertion_probe(model, manifold)
        bleu = evalverify.bleu4(
            rationale.split(), record.rationale.split()
        )
        rows.append(
            {
                "level": record.level,
                "em": bool(em),
                "bleu": bleu,
                "rationale": rationale,
                "meta": corpus.metas[record.object_id],
                "object_id": record.object_id,
                "answer": answer,
                "gold": record.answer,
            }
        )
    return evalverify.aggregate_report(rows, mode=mode)


# -- gradient checking ------------------------------------------------------

_GRADCHECK_GROUPS = [
    ["fus_wq", "fus_wk", "fus_wv", "fus_rho"],
    ["fus_fourier_w1", "fus_fourier_b1", "fus_fourier_w2", "fus_fourier_b2"],
    ["fus_gate_w", "fus_gate_b", "fus_norm_gamma", "fus_norm_beta"],
    ["anc_phi_w1", "anc_phi_b2", "anc_psi_w2", "anc_psi_b1"],
    ["fus_llm_proj_w", "fus_llm_proj_b", "fus_rho"],
    ["pt_w1", "pt_proj_b", "vis_patch_b", "vis_view_emb"],
    ["lm_lnf_g", "lm0_wq", "lm0_ff_b1", "lm_pos"],
]


def micro_config(seed: int = 0) -> RunConfig:
    return RunConfig(
        objects=2,
        n_points=24,
        seed=seed,
        feature_dim=6,
        n_geo_tokens=4,
        knn_k=4,
        patch_grid=1,
        pos_bands=2,
        l_bands=2,
        enc_hidden=6,
        image_size=8,
        d_llm=8,
        n_layers=1,
        n_heads=2,
        context=64,
        proj_dim=4,
        batch_size=2,
    )


def _micro_instance(seed: int):
    """Tiny random model + sample for oracle gradient checks."""
    cfg = micro_config(seed)
    vocab = Vocab(["alpha", "beta", "gamma", "delta", "3"])
    rng = Rng(seed)
    model = Model(cfg, vocab, rng)
    cloud = geometry.normalize_to_unit_sphere(
        rng.normal((cfg.n_points, 3)), object_id=f"micro-{seed}"
    )
    cloud_b = geometry.normalize_to_unit_sphere(
        rng.normal((cfg.n_points, 3)), object_id=f"micro-{seed}-b"
    )
    views = encoders.render_splat_views(cloud, model.rig)
    views_b = encoders.render_splat_views(cloud_b, model.rig)
    record = datagen.DatasetRecord(
        object_id=f"micro-{seed}",
        level=1,
        question="alpha beta ?",
        rationale="gamma delta gamma",
        answer="3",
    )
    return model, cloud, views, cloud_b, views_b, record


def gradcheck_report(n_seeds: int = 20, tol: float = 1e-4, h: float = 1e-5) -> dict:
    """Finite-difference check of the full fused loss on micro-instances.

    Each seed differentiates one rotating parameter group through the entire
    attention + gate + decoder + anchor + total-loss chain.
    """
    results = {"instances": [], "max_rel_err": 0.0, "tol": tol, "passed": True}
    for seed in range(n_seeds):
        model, cloud, views, cloud_b, views_b, record = _micro_instance(seed)
        cfg = model.cfg
        target = build_target(record, model.vocab, "cot")
        loss_cfg = LossConfig(
            lam=cfg.lam, alpha=cfg.alpha, tau=cfg.tau, proj_dim=cfg.proj_dim, stage=2
        )

        def f():
            logits, hidden, pooled = _element_losses(model, record, cloud, views, target)
            neg_pooled = model.manifold(cloud_b, views_b, []).geo_features.mean(axis=0)
            gen = objectives.loss_gen(logits, target.ids, target.gen_span)
            pred = objectives.loss_pred(logits, target.ids, target.pred_span)
            lo, hi = target.rationale_positions
            anchor = objectives.loss_anchor(
                hidden[lo:hi], pooled, neg_pooled.reshape(1, -1),
                model.params, cfg.tau,
            )
            return objectives.loss_total(LossParts(gen, pred, anchor), loss_cfg)

        group = _GRADCHECK_GROUPS[seed % len(_GRADCHECK_GROUPS)]
        params = {name: model.params[name] for name in group}
        report = finite_diff_check(f, params, h=h, tol=tol)
        results["instances"].append(
            {"seed": seed, "group": group, "max_rel_err": report["max_rel_err"],
             "per_param": report["per_param"]}
        )
        results["max_rel_err"] = max(results["max_rel_err"], report["max_rel_err"])
    results["passed"] = results["max_rel_err"] < tol
    return results
