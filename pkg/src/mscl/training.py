"""Training, evaluation, and generation over prepared studies.

Determinism contract: everything is derived from the run seed. Parameter
init uses the seed, epoch shuffles use (seed, epoch), and the training
state is quantized through float32 at every epoch boundary (the checkpoint
payload precision), which makes resume-from-checkpoint reproduce an
uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import objectives as obj
from .checkpoint import load_checkpoint, quantize_fp32, save_checkpoint
from .config import RunConfig
from .data import BOS, EOS, STATES, Study, Vocabulary, build_vocab, split_dataset, tokenize
from .errors import CompatibilityError, ConfigError, TrainingError
from .metrics import EvalPair, bleu
from .model import MsclModel
from .segmenter import GrayImage, ProposalsDirBackend, ThresholdBackend, segment_image


def make_backend(config: RunConfig):
    if config.data.backend == "proposals-dir":
        return ProposalsDirBackend(config.data.proposals_dir)
    return ThresholdBackend()


@dataclass(eq=False)
class PreparedStudy:
    id: str
    images: list[GrayImage]
    indication_ids: list[int]
    prefix_ids: list[int]
    target_onehot: np.ndarray
    state_targets: np.ndarray
    state_indices: np.ndarray
    label: frozenset
    reference_tokens: list[str]


@dataclass(eq=False)
class PreparedData:
    train: list[PreparedStudy]
    val: list[PreparedStudy]
    test: list[PreparedStudy]
    vocab: Vocabulary

    def split(self, name: str) -> list[PreparedStudy]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split '{name}'")
        return getattr(self, name)


def _prepare_study(study: Study, vocab: Vocabulary, config: RunConfig, images: list[GrayImage]) -> PreparedStudy:
    model_cfg = config.model
    report_tokens = tokenize(study.report)
    prefix_ids = [BOS] + vocab.encode(report_tokens)
    target_ids = vocab.encode(report_tokens) + [EOS]
    if len(prefix_ids) > model_cfg.max_report_len:
        raise ConfigError(
            f"study {study.id}: report of {len(report_tokens)} tokens exceeds "
            f"max_report_len {model_cfg.max_report_len}"
        )
    if len(study.topic_states) != model_cfg.topics:
        raise ConfigError(
            f"study {study.id}: {len(study.topic_states)} topic states, expected {model_cfg.topics}"
        )
    state_indices = np.array([STATES.index(s) for s in study.topic_states], dtype=np.int64)
    if state_indices.max(initial=0) >= model_cfg.states:
        raise ConfigError(
            f"study {study.id}: state index {state_indices.max()} does not fit {model_cfg.states} states"
        )
    vocab_size = len(vocab)
    return PreparedStudy(
        id=study.id,
        images=images,
        indication_ids=vocab.encode(tokenize(study.indication)),
        prefix_ids=prefix_ids,
        target_onehot=obj.one_hot(target_ids, vocab_size),
        state_targets=obj.one_hot(state_indices, model_cfg.states),
        state_indices=state_indices,
        label=obj.report_label(study.topic_states),
        reference_tokens=report_tokens,
    )


def prepare_data(config: RunConfig, studies: Sequence[Study] | None = None) -> PreparedData:
    """Load, split, build the vocabulary, and preprocess every view once."""
    if studies is None:
        if not config.data.manifest:
            raise ConfigError("config has no dataset manifest")
        studies = datamod.load_dataset(config.data.manifest, n_topics=config.model.topics)
    train, val, test = split_dataset(list(studies), seed=config.seed)
    vocab = build_vocab(
        [s.report for s in train] + [s.indication for s in train], min_freq=1
    )
    backend = None if config.training.no_sam else make_backend(config)
    prepared = {}
    for name, subset in (("train", train), ("val", val), ("test", test)):
        rows = []
        for study in subset:
            views = study.images if not config.training.single_view else study.images[:1]
            paths = study.image_paths if not config.training.single_view else study.image_paths[:1]
            if backend is None:
                images = list(views)
            else:
                images = []
                for k, view in enumerate(views):
                    image_id = Path(paths[k]).stem if k < len(paths) else None
                    images.append(segment_image(view, backend, config.segmenter, image_id=image_id))
            rows.append(_prepare_study(study, vocab, config, images))
        prepared[name] = rows
    return PreparedData(train=prepared["train"], val=prepared["val"], test=prepared["test"], vocab=vocab)


# ---------------------------------------------------------------------------
# losses over a batch
# ---------------------------------------------------------------------------


def _mean(terms: list[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(terms))


def raise_on_nan(values: dict[str, float], context: str) -> None:
    """Abort training when any loss term went NaN, naming the term."""
    for term, value in values.items():
        if np.isnan(value):
            raise TrainingError(f"NaN loss in term {term} {context}")


def batch_losses(
    model: MsclModel,
    head: obj.ContrastiveHead,
    batch: Sequence[PreparedStudy],
    config: RunConfig,
) -> obj.LossBundle:
    """Forward every study in the batch and assemble the mixed objective."""
    c_terms = []
    ce_terms = []
    z_img = []
    z_txt = []
    labels = []
    for ps in batch:
        bundle = model.forward_study(ps.images, ps.indication_ids, ps.prefix_ids)
        c_terms.append(obj.classification_loss(bundle.state_probs, ad.Tensor(ps.state_targets)))
        ce_terms.append(obj.generation_loss(bundle.word_probs, ad.Tensor(ps.target_onehot)))
        zi, zt = head.project(ad.mean_rows(bundle.topic_image), ad.mean_rows(bundle.text_hidden))
        z_img.append(zi)
        z_txt.append(zt)
        labels.append(ps.label)
    contrastive = obj.contrastive_loss(
        obj.ContrastiveBatch(
            z_img=z_img,
            z_txt=z_txt,
            labels=labels,
            tau=config.training.tau,
            theta=config.training.theta,
            label_mode=config.training.label_mode,
        )
    )
    # the no-cl ablation keeps logging the contrastive term but removes it
    # from the mixture entirely
    lam = 1.0 if config.training.no_cl else config.training.lam
    return obj.LossBundle(l_c=_mean(c_terms), l_ce=_mean(ce_terms), l_cl=contrastive, lam=lam)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def candidate_tokens(vocab: Vocabulary, ids: Sequence[int]) -> list[str]:
    return vocab.decode(vocab.strip_specials(ids))


def generation_pairs(
    model: MsclModel,
    vocab: Vocabulary,
    studies: Sequence[PreparedStudy],
    strategy: str = "greedy",
    beam_width: int = 1,
) -> list[tuple[str, EvalPair]]:
    pairs = []
    for ps in studies:
        ids = model.generate(ps.images, ps.indication_ids, strategy=strategy, beam_width=beam_width)
        pairs.append((ps.id, EvalPair.of(candidate_tokens(vocab, ids), ps.reference_tokens)))
    return pairs


def split_bleu4(model: MsclModel, vocab: Vocabulary, studies: Sequence[PreparedStudy]) -> float:
    if not studies:
        return 0.0
    return bleu([pair for _, pair in generation_pairs(model, vocab, studies)], 4)


def state_accuracy(model: MsclModel, studies: Sequence[PreparedStudy]) -> float:
    """Fraction of (study, topic) pairs whose argmax state matches the label."""
    correct = 0
    total = 0
    for ps in studies:
        bundle = model.encode_study(ps.images, ps.indication_ids)
        predicted = bundle.state_probs.data.argmax(axis=1)
        correct += int((predicted == ps.state_indices).sum())
        total += len(ps.state_indices)
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    best_val_bleu4: float
    log_path: Path
    last_checkpoint: Path
    best_checkpoint: Path
    stopped_early: bool = False


def _quantize_state(params: dict[str, ad.Tensor], optimizer: ad.AdamW) -> None:
    for p in params.values():
        p.data = quantize_fp32(p.data)
    for store in (optimizer.m, optimizer.v):
        for name in store:
            store[name] = quantize_fp32(store[name])


def _state_tensors(params: dict[str, ad.Tensor], optimizer: ad.AdamW) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in params.items()}
    for name, arr in optimizer.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in optimizer.v.items():
        tensors[f"opt.v.{name}"] = arr
    return tensors


def train_model(
    config: RunConfig,
    studies: Sequence[Study] | None = None,
    resume: str | Path | None = None,
    epoch_callback: Callable[[int, MsclModel, obj.ContrastiveHead, PreparedData], bool] | None = None,
) -> tuple[TrainResult, MsclModel, obj.ContrastiveHead, PreparedData]:
    """Run minibatch AdamW on the mixed objective; returns result and state.

    ``epoch_callback`` (tests only) may return True to stop after an epoch.
    """
    prepared = prepare_data(config, studies=studies)
    vocab = prepared.vocab
    model = MsclModel(config.model.to_model_config(len(vocab)), seed=config.seed)
    head = obj.ContrastiveHead(config.model.embed_dim, seed=config.seed + 1)
    params = {**model.named_params, **head.named_params}
    optimizer = ad.AdamW(
        params,
        lr=config.training.lr,
        weight_decay=config.training.weight_decay,
    )

    out_dir = Path(config.data.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"

    start_epoch = 0
    best_val = -1.0
    best_epoch = -1
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        if meta.get("config") != config.as_dict():
            raise CompatibilityError("checkpoint configuration does not match this run")
        if meta.get("vocab") != vocab.id_to_token:
            raise CompatibilityError("checkpoint vocabulary does not match the dataset")
        for name, p in params.items():
            if name not in tensors:
                raise CompatibilityError(f"checkpoint is missing tensor '{name}'")
            if tensors[name].shape != p.data.shape:
                raise CompatibilityError(f"checkpoint tensor '{name}' has shape {tensors[name].shape}")
            p.data = tensors[name]
        optimizer.load_state_dict(
            {
                "t": meta["adam_t"],
                "m": {name: tensors[f"opt.m.{name}"] for name in params},
                "v": {name: tensors[f"opt.v.{name}"] for name in params},
            }
        )
        start_epoch = int(meta["epoch"]) + 1
        best_val = float(meta["best_val_bleu4"])
        best_epoch = int(meta["best_epoch"])
    else:
        log_path.write_text("")

    train_set = prepared.train
    batch_size = config.training.batch_size
    stopped_early = False
    epoch = start_epoch - 1
    for epoch in range(start_epoch, config.training.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        epoch_terms = {"l_c": [], "l_ce": [], "l_cl": [], "l_total": []}
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start:start + batch_size]]
            with ad.Tape() as tape:
                losses = batch_losses(model, head, batch, config)
            values = losses.values()
            raise_on_nan(values, f"at epoch {epoch}")
            for term, value in values.items():
                epoch_terms[term].append(value)
            tape.backward(losses.l_total)
            optimizer.step()
            optimizer.zero_grad()

        # pass the live state through the checkpoint precision so that a
        # resumed run and this run continue from identical bits
        _quantize_state(params, optimizer)

        val_bleu4 = split_bleu4(model, vocab, prepared.val)
        record = {
            "epoch": epoch,
            "l_c": float(np.mean(epoch_terms["l_c"])),
            "l_ce": float(np.mean(epoch_terms["l_ce"])),
            "l_cl": float(np.mean(epoch_terms["l_cl"])),
            "l_total": float(np.mean(epoch_terms["l_total"])),
            "val_bleu4": val_bleu4,
        }
        with open(log_path, "a") as handle:
            handle.write(json.dumps(record) + "\n")

        if val_bleu4 > best_val:
            best_val = val_bleu4
            best_epoch = epoch
            save_checkpoint(
                best_path,
                {name: p.data for name, p in model.named_params.items()},
                meta={
                    "config": config.as_dict(),
                    "vocab": vocab.id_to_token,
                    "epoch": epoch,
                    "val_bleu4": val_bleu4,
                },
            )
        save_checkpoint(
            last_path,
            _state_tensors(params, optimizer),
            meta={
                "config": config.as_dict(),
                "vocab": vocab.id_to_token,
                "epoch": epoch,
                "adam_t": optimizer.t,
                "best_val_bleu4": best_val,
                "best_epoch": best_epoch,
            },
        )
        if epoch_callback is not None and epoch_callback(epoch, model, head, prepared):
            stopped_early = True
            break

    result = TrainResult(
        epochs_run=epoch - start_epoch + 1,
        best_epoch=best_epoch,
        best_val_bleu4=best_val,
        log_path=log_path,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        stopped_early=stopped_early,
    )
    return result, model, head, prepared


def load_model_for_inference(checkpoint_path: str | Path) -> tuple[MsclModel, Vocabulary, RunConfig]:
    """Rebuild a model from a checkpoint's embedded config and vocabulary."""
    from .config import config_from_dict

    tensors, meta = load_checkpoint(checkpoint_path)
    if "config" not in meta or "vocab" not in meta:
        raise CompatibilityError(f"{checkpoint_path}: checkpoint lacks embedded config/vocab")
    config = config_from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    model = MsclModel(config.model.to_model_config(len(vocab)), seed=config.seed)
    for name, p in model.named_params.items():
        if name not in tensors:
            raise CompatibilityError(f"{checkpoint_path}: missing tensor '{name}'")
        if tensors[name].shape != p.data.shape:
            raise CompatibilityError(
                f"{checkpoint_path}: tensor '{name}' has shape {tensors[name].shape}, "
                f"expected {p.data.shape}"
            )
        p.data = tensors[name]
    return model, vocab, config


# ---------------------------------------------------------------------------
# the end-to-end gradient-check problem
# ---------------------------------------------------------------------------


@dataclass
class GradcheckProblem:
    named_params: dict[str, ad.Tensor]
    build_loss: Callable[[], ad.Tensor]


def build_gradcheck_problem(seed: int = 0) -> GradcheckProblem:
    """A two-study batch through a tiny full model, mixing all three losses."""
    from .config import DataSection, ModelSection, TrainingSection

    spec = datamod.SynthSpec(
        count=12,
        topics=datamod.DEFAULT_TOPICS[:3],
        normal_templates=datamod.DEFAULT_NORMAL_TEMPLATES[:3],
        abnormal_templates=datamod.DEFAULT_ABNORMAL_TEMPLATES[:3],
        abnormality_rate=0.5,
        image_size=16,
        pixel_noise=0.01,
        seed=seed,
    )
    studies = datamod.synth_corpus(spec)
    config = RunConfig(
        seed=seed,
        model=ModelSection(
            topics=3,
            states=4,
            embed_dim=12,
            feature_dim=6,
            layers=1,
            heads=2,
            ffn_dim=16,
            max_report_len=32,
            patch_size=4,
        ),
        training=TrainingSection(lam=0.8, theta=2.0, tau=0.5, batch_size=2, epochs=1),
        data=DataSection(out_dir="unused"),
    )
    config = config.replace_training(no_sam=True)
    prepared = prepare_data(config, studies=studies)
    batch = prepared.train[:2]
    model = MsclModel(config.model.to_model_config(len(prepared.vocab)), seed=seed)
    head = obj.ContrastiveHead(config.model.embed_dim, seed=seed + 1)
    params = {**model.named_params, **head.named_params}

    def build_loss() -> ad.Tensor:
        return batch_losses(model, head, batch, config).l_total

    return GradcheckProblem(named_params=params, build_loss=build_loss)
