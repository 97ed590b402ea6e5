"""The report-generation network.

A patch-projection visual extractor pools multi-view features and decouples
them into per-topic embeddings; a transformer text encoder summarizes the
indication through learned topic queries; the fused topic embeddings feed a
state classifier and a transformer decoder that generates the report.

One vocabulary embedding table is shared by the encoder input, the decoder
input, and the decoder's output projection (weight tying keeps the desk-
scale parameter count down without changing any interface).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import BOS, EOS, PAD
from .errors import EmptyInputError, InvalidValueError, LengthError, ShapeError
from .segmenter import GrayImage

NEG_MASK = -1e9  # additive score mask; exp underflows to exactly 0


@dataclass(frozen=True)
class ModelConfig:
    topics: int = 6
    states: int = 4
    embed_dim: int = 256
    feature_dim: int = 128
    vocab_size: int = 64
    layers: int = 3
    heads: int = 4
    ffn_dim: int = 512
    max_report_len: int = 64
    patch_size: int = 32
    use_positions: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        positive = {
            "topics": self.topics,
            "states": self.states,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_report_len": self.max_report_len,
            "patch_size": self.patch_size,
        }
        for name, value in positive.items():
            if value < 1:
                raise InvalidValueError(f"{name} must be positive, got {value}")
        if self.states < 2:
            raise InvalidValueError("states must be at least 2")
        if self.embed_dim % self.heads != 0:
            raise InvalidValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )

    def as_dict(self) -> dict:
        return {
            "topics": self.topics,
            "states": self.states,
            "embed_dim": self.embed_dim,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_report_len": self.max_report_len,
            "patch_size": self.patch_size,
            "use_positions": self.use_positions,
            "layer_norm_eps": self.layer_norm_eps,
        }


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table, one row per position."""
    table = np.zeros((length, dim))
    position = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: (dim + 1) // 2])
    return table


class _Params:
    """Accumulates named parameters while the model is assembled."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.named: dict[str, ad.Tensor] = {}

    def xavier(self, name: str, d_in: int, d_out: int) -> ad.Tensor:
        bound = math.sqrt(6.0 / (d_in + d_out))
        return self.add(name, self.rng.uniform(-bound, bound, size=(d_in, d_out)))

    def normal(self, name: str, shape: tuple[int, ...], std: float = 0.02) -> ad.Tensor:
        return self.add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> ad.Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> ad.Tensor:
        return self.add(name, np.ones(shape))

    def add(self, name: str, data: np.ndarray) -> ad.Tensor:
        if name in self.named:
            raise ValueError(f"duplicate parameter name {name}")
        tensor = ad.Tensor(data, requires_grad=True)
        self.named[name] = tensor
        return tensor


class Linear:
    def __init__(self, params: _Params, name: str, d_in: int, d_out: int, gain: float = 1.0):
        self.w = params.xavier(f"{name}.w", d_in, d_out)
        if gain != 1.0:
            self.w.data *= gain
        self.b = params.zeros(f"{name}.b", (d_out,))

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, params: _Params, name: str, dim: int, eps: float):
        self.gain = params.ones(f"{name}.gain", (dim,))
        self.bias = params.zeros(f"{name}.bias", (dim,))
        self.eps = eps

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections."""

    def __init__(self, params: _Params, name: str, dim: int, heads: int):
        head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(head_dim)
        self.heads = []
        for h in range(heads):
            self.heads.append(
                (
                    Linear(params, f"{name}.h{h}.q", dim, head_dim),
                    Linear(params, f"{name}.h{h}.k", dim, head_dim),
                    Linear(params, f"{name}.h{h}.v", dim, head_dim),
                )
            )
        self.out = Linear(params, f"{name}.out", dim, dim)

    def __call__(self, queries: ad.Tensor, keys_values: ad.Tensor, mask: np.ndarray | None = None) -> ad.Tensor:
        outputs = []
        for q_proj, k_proj, v_proj in self.heads:
            q = q_proj(queries)
            k = k_proj(keys_values)
            v = v_proj(keys_values)
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), self.scale)
            if mask is not None:
                scores = ad.add(scores, ad.Tensor(mask))
            weights = ad.softmax_rows(scores)
            outputs.append(ad.matmul(weights, v))
        return self.out(ad.concat_cols(outputs))


class FeedForward:
    def __init__(self, params: _Params, name: str, dim: int, hidden: int):
        self.fc1 = Linear(params, f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(params, f"{name}.fc2", hidden, dim)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class EncoderLayer:
    def __init__(self, params: _Params, name: str, config: ModelConfig):
        d = config.embed_dim
        self.attn = MultiHeadAttention(params, f"{name}.attn", d, config.heads)
        self.ln1 = LayerNorm(params, f"{name}.ln1", d, config.layer_norm_eps)
        self.ffn = FeedForward(params, f"{name}.ffn", d, config.ffn_dim)
        self.ln2 = LayerNorm(params, f"{name}.ln2", d, config.layer_norm_eps)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        x = self.ln1(ad.add(x, self.attn(x, x)))
        return self.ln2(ad.add(x, self.ffn(x)))


class DecoderLayer:
    def __init__(self, params: _Params, name: str, config: ModelConfig):
        d = config.embed_dim
        self.self_attn = MultiHeadAttention(params, f"{name}.self", d, config.heads)
        self.ln1 = LayerNorm(params, f"{name}.ln1", d, config.layer_norm_eps)
        self.cross_attn = MultiHeadAttention(params, f"{name}.cross", d, config.heads)
        self.ln2 = LayerNorm(params, f"{name}.ln2", d, config.layer_norm_eps)
        self.ffn = FeedForward(params, f"{name}.ffn", d, config.ffn_dim)
        self.ln3 = LayerNorm(params, f"{name}.ln3", d, config.layer_norm_eps)

    def __call__(self, x: ad.Tensor, topic_embed: ad.Tensor, causal_mask: np.ndarray) -> ad.Tensor:
        x = self.ln1(ad.add(x, self.self_attn(x, x, mask=causal_mask)))
        x = self.ln2(ad.add(x, self.cross_attn(x, topic_embed)))
        return self.ln3(ad.add(x, self.ffn(x)))


@dataclass(eq=False)
class ForwardBundle:
    """Everything one study's forward pass produces for the objectives."""

    pooled_features: ad.Tensor  # [c]
    topic_image: ad.Tensor      # D_img [n x d]
    text_hidden: ad.Tensor      # H [l x d]
    topic_text: ad.Tensor       # D_txt [n x d]
    topic_fused: ad.Tensor      # D_it [n x d]
    state_probs: ad.Tensor      # p [n x k]
    decoder_hidden: ad.Tensor | None  # [l_dec x d]
    word_probs: ad.Tensor | None      # [l_dec x v]


class MsclModel:
    """Visual extractor, text encoder, fusion, classifier, and report decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        params = _Params(np.random.default_rng(seed))
        p = config.patch_size
        d = config.embed_dim

        # pixel intensities are far below unit variance, so the first visual
        # projection gets a larger init to land its outputs at a healthy scale
        self.patch_proj = Linear(params, "visual.patch", p * p, config.feature_dim, gain=8.0)
        self.disease_a = []
        self.disease_b = []
        for j in range(config.topics):
            self.disease_a.append(params.xavier(f"visual.disease{j}.a", config.feature_dim, d))
            self.disease_b.append(params.zeros(f"visual.disease{j}.b", (d,)))

        self.embedding = params.normal("embed.w", (config.vocab_size, d))
        self.encoder_layers = [
            EncoderLayer(params, f"encoder.{i}", config) for i in range(config.layers)
        ]
        self.topic_queries = params.normal("topics.q", (config.topics, d))
        self.fuse_norm = LayerNorm(params, "fuse", d, config.layer_norm_eps)
        self.state_embed = params.normal("classifier.s", (config.states, d))
        self.decoder_layers = [
            DecoderLayer(params, f"decoder.{i}", config) for i in range(config.layers)
        ]

        self.named_params = params.named
        self._positions = sinusoidal_positions(config.max_report_len + 1, d)
        self._causal_masks: dict[int, np.ndarray] = {}

    # -- visual path --------------------------------------------------------

    def patchify(self, image: GrayImage) -> ad.Tensor:
        """Non-overlapping patches as rows, row-major over the patch grid."""
        p = self.config.patch_size
        if image.height % p or image.width % p:
            raise ShapeError(
                f"image {image.width}x{image.height} is not divisible by patch size {p}"
            )
        gh, gw = image.height // p, image.width // p
        patches = image.pixels.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
        return ad.Tensor(patches)

    def extract_view(self, image: GrayImage) -> ad.Tensor:
        """One view's feature vector: patchify, project, mean over patches."""
        projected = self.patch_proj(self.patchify(image))
        return ad.mean_rows(projected)

    def pool_views(self, features: Sequence[ad.Tensor]) -> ad.Tensor:
        return ad.max_pool_rows(features)

    def project_diseases(self, pooled: ad.Tensor) -> ad.Tensor:
        """Per-topic affine maps of the pooled feature vector, stacked as rows."""
        if pooled.shape != (self.config.feature_dim,):
            raise ShapeError(f"expected a ({self.config.feature_dim},) feature vector, got {pooled.shape}")
        row = ad.reshape(pooled, (1, self.config.feature_dim))
        rows = []
        for a, b in zip(self.disease_a, self.disease_b):
            rows.append(ad.add(ad.reshape(ad.matmul(row, a), (self.config.embed_dim,)), b))
        return ad.stack_rows(rows)

    # -- text path ----------------------------------------------------------

    def _embed(self, ids: Sequence[int]) -> ad.Tensor:
        embedded = ad.gather_rows(self.embedding, list(ids))
        if self.config.use_positions:
            embedded = ad.add(embedded, ad.Tensor(self._positions[: len(ids)]))
        return embedded

    def encode_text(self, ids: Sequence[int]) -> ad.Tensor:
        """Bidirectional hidden states, one per token; empty input becomes PAD."""
        ids = list(ids) or [PAD]
        if len(ids) > self.config.max_report_len:
            raise LengthError(f"text of {len(ids)} tokens exceeds limit {self.config.max_report_len}")
        x = self._embed(ids)
        for layer in self.encoder_layers:
            x = layer(x)
        return x

    def topic_attention(self, text_hidden: ad.Tensor) -> ad.Tensor:
        """Topic-query attention over token states; rows are convex mixtures."""
        if text_hidden.ndim != 2 or text_hidden.shape[0] == 0:
            raise EmptyInputError("topic attention needs at least one token state")
        weights = ad.softmax_rows(ad.matmul(self.topic_queries, ad.transpose(text_hidden)))
        return ad.matmul(weights, text_hidden)

    # -- fusion and heads -----------------------------------------------------

    def fuse(self, topic_image: ad.Tensor, topic_text: ad.Tensor) -> ad.Tensor:
        if topic_image.shape != topic_text.shape:
            raise ShapeError(f"cannot fuse {topic_image.shape} with {topic_text.shape}")
        return self.fuse_norm(ad.add(topic_image, topic_text))

    def classify_states(self, topic_fused: ad.Tensor) -> ad.Tensor:
        return ad.softmax_rows(ad.matmul(topic_fused, ad.transpose(self.state_embed)))

    # -- decoder --------------------------------------------------------------

    def _causal_mask(self, length: int) -> np.ndarray:
        mask = self._causal_masks.get(length)
        if mask is None:
            mask = np.triu(np.full((length, length), NEG_MASK), k=1)
            self._causal_masks[length] = mask
        return mask

    def decode_hidden(self, prefix_ids: Sequence[int], topic_fused: ad.Tensor) -> ad.Tensor:
        """Causal self-attention over the prefix plus cross-attention over topics."""
        prefix_ids = list(prefix_ids)
        if not prefix_ids or prefix_ids[0] != BOS:
            raise InvalidValueError("decoder prefix must begin with BOS")
        if len(prefix_ids) > self.config.max_report_len:
            raise LengthError(
                f"prefix of {len(prefix_ids)} tokens exceeds limit {self.config.max_report_len}"
            )
        x = self._embed(prefix_ids)
        mask = self._causal_mask(len(prefix_ids))
        for layer in self.decoder_layers:
            x = layer(x, topic_fused, mask)
        return x

    def word_distribution(self, decoder_hidden: ad.Tensor) -> ad.Tensor:
        return ad.softmax_rows(ad.matmul(decoder_hidden, ad.transpose(self.embedding)))

    def weighted_word_embedding(self, word_probs: ad.Tensor) -> ad.Tensor:
        """Expected embedding under each position's vocabulary distribution."""
        return ad.matmul(word_probs, self.embedding)

    # -- whole-study passes ---------------------------------------------------

    def encode_study(self, images: Sequence[GrayImage], indication_ids: Sequence[int]) -> ForwardBundle:
        """Everything up to the fused topic embeddings and state probabilities."""
        if not images:
            raise EmptyInputError("a study needs at least one view")
        features = [self.extract_view(image) for image in images]
        pooled = self.pool_views(features)
        topic_image = self.project_diseases(pooled)
        text_hidden = self.encode_text(indication_ids)
        topic_text = self.topic_attention(text_hidden)
        topic_fused = self.fuse(topic_image, topic_text)
        state_probs = self.classify_states(topic_fused)
        return ForwardBundle(
            pooled_features=pooled,
            topic_image=topic_image,
            text_hidden=text_hidden,
            topic_text=topic_text,
            topic_fused=topic_fused,
            state_probs=state_probs,
            decoder_hidden=None,
            word_probs=None,
        )

    def forward_study(
        self,
        images: Sequence[GrayImage],
        indication_ids: Sequence[int],
        prefix_ids: Sequence[int],
    ) -> ForwardBundle:
        bundle = self.encode_study(images, indication_ids)
        bundle.decoder_hidden = self.decode_hidden(prefix_ids, bundle.topic_fused)
        bundle.word_probs = self.word_distribution(bundle.decoder_hidden)
        return bundle

    # -- generation -------------------------------------------------------------

    def generate(
        self,
        images: Sequence[GrayImage],
        indication_ids: Sequence[int],
        strategy: str = "greedy",
        beam_width: int = 1,
    ) -> list[int]:
        """Autoregressive decoding from BOS until EOS or the length limit.

        Greedy picks the argmax token (ties resolve to the lowest id); beam
        search ranks hypotheses by total log probability with no length
        normalization, so beam width 1 reproduces greedy exactly.
        """
        if strategy not in ("greedy", "beam"):
            raise InvalidValueError(f"unknown strategy '{strategy}'")
        if strategy == "beam" and not 1 <= beam_width <= 8:
            raise InvalidValueError("beam width must lie in [1, 8]")
        bundle = self.encode_study(images, indication_ids)
        topic_fused = bundle.topic_fused
        limit = self.config.max_report_len
        if strategy == "greedy" or beam_width == 1:
            output: list[int] = []
            while len(output) < limit:
                hidden = self.decode_hidden([BOS] + output, topic_fused)
                probs = self.word_distribution(hidden).data[-1]
                token = int(np.argmax(probs))
                output.append(token)
                if token == EOS:
                    break
            return output

        beams: list[tuple[float, list[int], bool]] = [(0.0, [], False)]
        for _ in range(limit):
            candidates: list[tuple[float, list[int], bool]] = []
            for score, tokens, finished in beams:
                if finished or len(tokens) >= limit:
                    candidates.append((score, tokens, True))
                    continue
                hidden = self.decode_hidden([BOS] + tokens, topic_fused)
                probs = self.word_distribution(hidden).data[-1]
                logp = np.log(np.clip(probs, ad.PROB_FLOOR, 1.0))
                top = np.argsort(-logp, kind="stable")[:beam_width]
                for token in top:
                    token = int(token)
                    candidates.append(
                        (score + float(logp[token]), tokens + [token], token == EOS)
                    )
            candidates.sort(key=lambda c: -c[0])
            beams = candidates[:beam_width]
            if all(finished or len(tokens) >= limit for _, tokens, finished in beams):
                break
        return beams[0][1]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_params.values())


def parameter_count(config: ModelConfig) -> int:
    """Total trainable scalars; a pure function of the configuration."""
    d = config.embed_dim
    head_dim = d // config.heads
    attn = 3 * config.heads * (d * head_dim + head_dim) + (d * d + d)
    ffn = d * config.ffn_dim + config.ffn_dim + config.ffn_dim * d + d
    ln = 2 * d
    encoder_layer = attn + ffn + 2 * ln
    decoder_layer = 2 * attn + ffn + 3 * ln
    visual = (config.patch_size ** 2) * config.feature_dim + config.feature_dim
    disease = config.topics * (config.feature_dim * d + d)
    embed = config.vocab_size * d
    return (
        visual
        + disease
        + embed
        + config.layers * encoder_layer
        + config.topics * d  # topic queries
        + ln  # fusion norm
        + config.states * d
        + config.layers * decoder_layer
    )
