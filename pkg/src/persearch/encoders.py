"""Dual-encoder contract, the deterministic toy backend, pseudo-word injection
and the frozen-feature cache.

The toy backend exists so the whole pipeline can be exercised on CPU in
seconds: a fixed random pixel projection feeds small trainable heads, and the
text side is a seeded bag-of-words MLP over token embeddings. The pretrained
backend adapts an external CLIP-style checkpoint behind the same interface.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import Dataset
from .hashing import module_fingerprint
from .tokenizer import MAX_TOKENS, TokenSequence, WhitespaceTokenizer

IMAGE_HEIGHT = 384
IMAGE_WIDTH = 128

CACHE_MAGIC = b"W4PCACHE"
CACHE_VERSION = 1


class FingerprintMismatchError(ValueError):
    """Features or pseudo-words were produced by a different encoder."""


class EncoderStateError(RuntimeError):
    """Operation requires the opposite frozen/trainable encoder state."""


@dataclass
class TokenEmbeddingSequence:
    """max_len x d_token embedding rows; rows past valid_length are PAD."""

    vectors: torch.Tensor
    valid_length: int

    def __post_init__(self):
        if self.vectors.shape[0] != MAX_TOKENS:
            raise ValueError(f"expected {MAX_TOKENS} rows, got {self.vectors.shape[0]}")


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"undecodable image {path}: {exc}") from exc


@dataclass(frozen=True)
class ToyEncoderConfig:
    d_embed: int = 64
    d_token: int = 32
    vocab_size: int = 1000
    seed: int = 0
    grid_rows: int = 12
    grid_cols: int = 4
    head_depth: int = 2
    extra_words: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"d_embed": self.d_embed, "d_token": self.d_token,
                "vocab_size": self.vocab_size, "seed": self.seed,
                "grid_rows": self.grid_rows, "grid_cols": self.grid_cols,
                "head_depth": self.head_depth,
                "extra_words": list(self.extra_words)}

    @classmethod
    def from_json(cls, obj: dict) -> "ToyEncoderConfig":
        obj = dict(obj)
        obj["extra_words"] = tuple(obj.get("extra_words", ()))
        return cls(**obj)


def _init_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    fan_in = layer.weight.shape[1]
    bound = 1.0 / (fan_in ** 0.5)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()


class ToyDualEncoder(nn.Module):
    """Seeded CPU-scale dual encoder with a whitespace tokenizer.

    Visual path: the image is resized to 384x128 grayscale, average-pooled
    into a grid of cells, each cell projected by a fixed seeded matrix, then
    passed through a small trainable head (the grid doubles as patch features
    for cross-modal masked-token prediction). Text path: token embeddings plus
    positions through a one-hidden-layer MLP with masked mean pooling.
    """

    def __init__(self, config: ToyEncoderConfig | None = None):
        super().__init__()
        self.config = config or ToyEncoderConfig()
        cfg = self.config
        self.tokenizer = WhitespaceTokenizer(
            vocab_size=cfg.vocab_size, extra_words=list(cfg.extra_words))
        gen = torch.Generator().manual_seed(cfg.seed)

        n_cells = cfg.grid_rows * cfg.grid_cols
        cell_pixels = (IMAGE_HEIGHT // cfg.grid_rows) * (IMAGE_WIDTH // cfg.grid_cols)
        # One fixed projection per grid cell; the scale keeps per-cell feature
        # variance near 1 for centered [-0.5, 0.5] pixels.
        proj = torch.randn(n_cells, cell_pixels, cfg.d_embed, generator=gen)
        proj *= 4.0 / cell_pixels ** 0.5
        self.register_buffer("pixel_proj", proj)

        layers: list[nn.Module] = []
        for i in range(cfg.head_depth):
            if i > 0:
                layers.append(nn.GELU())
            layers.append(nn.Linear(cfg.d_embed, cfg.d_embed))
        self.visual_head = nn.Sequential(*layers)
        self.patch_head = nn.Linear(cfg.d_embed, cfg.d_embed)

        self.token_table = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_token))
        self.position_table = nn.Parameter(torch.empty(MAX_TOKENS, cfg.d_token))
        with torch.no_grad():
            self.token_table.normal_(0.0, 0.02, generator=gen)
            self.position_table.normal_(0.0, 0.02, generator=gen)
        self.text_in = nn.Linear(cfg.d_token, cfg.d_embed)
        self.text_out = nn.Linear(cfg.d_embed, cfg.d_embed)

        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                _init_linear(mod, gen)
        self._frozen = False

    # -- properties ------------------------------------------------------

    @property
    def d_embed(self) -> int:
        return self.config.d_embed

    @property
    def d_token(self) -> int:
        return self.config.d_token

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ToyDualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True
        return self

    def fingerprint(self) -> bytes:
        return module_fingerprint(self, self.config.to_json())

    # -- visual path -----------------------------------------------------

    def preprocess_image(self, image: Image.Image | np.ndarray) -> torch.Tensor:
        """Resize to 384x128, grayscale, split into grid cells. -> (cells, pix)"""
        if isinstance(image, np.ndarray):
            image = Image.fromarray(image)
        img = image.convert("L").resize((IMAGE_WIDTH, IMAGE_HEIGHT), Image.BILINEAR)
        x = np.asarray(img, dtype=np.float32) / 255.0 - 0.5
        gr, gc = self.config.grid_rows, self.config.grid_cols
        ch, cw = IMAGE_HEIGHT // gr, IMAGE_WIDTH // gc
        cells = x.reshape(gr, ch, gc, cw).transpose(0, 2, 1, 3).reshape(gr * gc, ch * cw)
        return torch.from_numpy(np.ascontiguousarray(cells))

    def forward_image_cells(self, cells: torch.Tensor):
        """(B, cells, pix) -> global (B, d_embed), patches (B, cells, d_embed)."""
        raw = torch.einsum("bcp,cpd->bcd", cells, self.pixel_proj)
        global_feat = self.visual_head(raw.mean(dim=1))
        patches = self.patch_head(raw)
        return global_feat, patches

    def forward_images(self, images: list):
        cells = torch.stack([self.preprocess_image(im) for im in images])
        return self.forward_image_cells(cells)

    def pixel_features(self, image) -> torch.Tensor:
        """Fixed projection of the normalized pixels, before the trainable head."""
        with torch.no_grad():
            cells = self.preprocess_image(image)
            return torch.einsum("cp,cpd->cd", cells, self.pixel_proj).mean(dim=0)

    def encode_image(self, image) -> torch.Tensor:
        with torch.no_grad():
            feat, _ = self.forward_images([image])
        if not torch.isfinite(feat).all():
            raise ValueError("image embedding is not finite")
        return feat[0]

    def encode_image_batch(self, images: list) -> torch.Tensor:
        with torch.no_grad():
            feats, _ = self.forward_images(images)
        return feats

    # -- text path -------------------------------------------------------

    def token_embeddings(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_table[token_ids]

    def encode_embedding_batch(self, vectors: torch.Tensor,
                               valid_lengths: torch.Tensor) -> torch.Tensor:
        """(B, max_len, d_token), (B,) -> (B, d_embed)."""
        positions = torch.arange(MAX_TOKENS, device=vectors.device)
        mask = (positions[None, :] < valid_lengths[:, None]).to(vectors.dtype)
        h = torch.nn.functional.gelu(self.text_in(vectors + self.position_table))
        pooled = (h * mask[:, :, None]).sum(dim=1) / mask.sum(dim=1, keepdim=True)
        return self.text_out(pooled)

    def encode_embedding_sequence(self, seq: TokenEmbeddingSequence) -> torch.Tensor:
        return self.encode_embedding_batch(
            seq.vectors[None], torch.tensor([seq.valid_length]))[0]

    def encode_token_batch(self, sequences: list[TokenSequence]) -> torch.Tensor:
        ids = torch.tensor([s.token_ids for s in sequences], dtype=torch.long)
        valid = torch.tensor([s.valid_length for s in sequences])
        return self.encode_embedding_batch(self.token_embeddings(ids), valid)

    def encode_text(self, text: str) -> torch.Tensor:
        with torch.no_grad():
            return self.encode_token_batch([self.tokenizer.tokenize(text)])[0]

    def encode_text_batch(self, texts: list[str]) -> torch.Tensor:
        with torch.no_grad():
            return self.encode_token_batch(
                [self.tokenizer.tokenize(t) for t in texts])


# -- pseudo-word injection -------------------------------------------------

TRAIN_TEMPLATE_WORDS = ("a", "photo", "of")
INFER_PREFIX_WORDS = ("a",)
INFER_COPULA = "is"


def _pseudo_vector(pseudo, d_token: int, dtype: torch.dtype) -> torch.Tensor:
    vec = getattr(pseudo, "vector", pseudo)
    if isinstance(vec, np.ndarray):
        vec = torch.from_numpy(vec)
    vec = vec.to(dtype)
    if vec.ndim != 1 or vec.shape[0] != d_token:
        raise ValueError(
            f"pseudo-word dimension {tuple(vec.shape)} does not match d_token={d_token}")
    return vec


def inject_pseudo_word(encoder, template: str, pseudo,
                       caption: str = "") -> TokenEmbeddingSequence:
    """Splice a raw pseudo-word vector into a prompt's token embeddings.

    train: [BOS, a, photo, of, S*, EOS] (caption must be empty)
    infer: [BOS, a, S*, is, caption..., EOS] (caption required; truncated
           before the frame so BOS/EOS and the pseudo slot survive)
    """
    vectors, valid, _ = _injected_batch(encoder, template, _pseudo_vector(
        pseudo, encoder.d_token, encoder.token_table.dtype)[None],
        [caption])
    return TokenEmbeddingSequence(vectors[0], int(valid[0]))


def _injected_batch(encoder, template: str, pseudo_batch: torch.Tensor,
                    captions: list[str]):
    """Batched template injection. -> (B, max_len, d_token), valid, slot index."""
    tok = encoder.tokenizer
    table = encoder.token_table
    batch = pseudo_batch.shape[0]
    if template == "train":
        for c in captions:
            if c:
                raise ValueError("train template takes no caption")
        body = [tok.ids[w] for w in TRAIN_TEMPLATE_WORDS]
        slot = 1 + len(body)
        ids = [tok.bos_id] + body + [tok.pad_id] + [tok.eos_id]
        valid = len(ids)
        ids += [tok.pad_id] * (MAX_TOKENS - valid)
        id_mat = torch.tensor([ids] * batch, dtype=torch.long)
        valid_lengths = torch.full((batch,), valid, dtype=torch.long)
    elif template == "infer":
        slot = 1 + len(INFER_PREFIX_WORDS)
        prefix = [tok.bos_id] + [tok.ids[w] for w in INFER_PREFIX_WORDS]
        copula = tok.ids[INFER_COPULA]
        room = MAX_TOKENS - len(prefix) - 3  # slot + copula + EOS
        id_rows, valids = [], []
        for c in captions:
            if not c or not c.strip():
                raise ValueError("infer template requires a caption")
            words = tok.word_ids(c)[:room]
            ids = prefix + [tok.pad_id, copula] + words + [tok.eos_id]
            valids.append(len(ids))
            ids += [tok.pad_id] * (MAX_TOKENS - len(ids))
            id_rows.append(ids)
        id_mat = torch.tensor(id_rows, dtype=torch.long)
        valid_lengths = torch.tensor(valids, dtype=torch.long)
    else:
        raise ValueError(f"unknown template {template!r}")
    vectors = table[id_mat]
    if pseudo_batch.shape[1] != table.shape[1]:
        raise ValueError(
            f"pseudo-word dimension {pseudo_batch.shape[1]} does not match "
            f"d_token={table.shape[1]}")
    vectors = vectors.clone()
    vectors[:, slot, :] = pseudo_batch.to(vectors.dtype)
    return vectors, valid_lengths, slot


# -- feature cache ----------------------------------------------------------

@dataclass
class FeatureTable:
    """Ordered id -> row mapping over a dense float32 feature matrix."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    row_index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or len(self.ids) != self.matrix.shape[0]:
            raise ValueError("ids and matrix rows disagree")
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        self.row_index = {id_: i for i, id_ in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.row_index

    def vector(self, image_id: str) -> np.ndarray:
        try:
            return self.matrix[self.row_index[image_id]]
        except KeyError:
            raise KeyError(f"no cached features for id {image_id!r}") from None


def _write_feature_file(path: Path, table: FeatureTable, fingerprint: bytes) -> None:
    count, dim = table.matrix.shape
    header = CACHE_MAGIC + struct.pack("<IIQ", CACHE_VERSION, dim, count) + fingerprint
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table.matrix.astype("<f4").tobytes())
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump({id_: i for i, id_ in enumerate(table.ids)}, fh)


def _read_feature_file(path: Path) -> tuple[FeatureTable, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, dim, count = struct.unpack("<IIQ", fh.read(16))
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        fingerprint = fh.read(32)
        data = fh.read(count * dim * 4)
    matrix = np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()
    with open(path.with_suffix(path.suffix + ".json"), encoding="utf-8") as fh:
        index = json.load(fh)
    ids = [""] * count
    for id_, row in index.items():
        ids[row] = id_
    return FeatureTable(tuple(ids), matrix), fingerprint


@dataclass
class FeatureCache:
    """Frozen-encoder global embeddings, keyed by image id."""

    images: FeatureTable
    texts: FeatureTable | None
    fingerprint: bytes

    def image_vector(self, image_id: str) -> np.ndarray:
        return self.images.vector(image_id)

    def text_vector(self, image_id: str) -> np.ndarray:
        if self.texts is None:
            raise KeyError("cache holds no text features")
        return self.texts.vector(image_id)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        _write_feature_file(directory / "images.w4p", self.images, self.fingerprint)
        if self.texts is not None:
            _write_feature_file(directory / "texts.w4p", self.texts, self.fingerprint)

    @classmethod
    def load(cls, directory: str | Path,
             expected_fingerprint: bytes | None = None) -> "FeatureCache":
        directory = Path(directory)
        images, fp = _read_feature_file(directory / "images.w4p")
        texts = None
        text_path = directory / "texts.w4p"
        if text_path.exists():
            texts, fp_text = _read_feature_file(text_path)
            if fp_text != fp:
                raise FingerprintMismatchError(
                    f"{directory}: image/text sections from different encoders")
        if expected_fingerprint is not None and fp != expected_fingerprint:
            raise FingerprintMismatchError(
                f"{directory}: cache was built by a different encoder")
        return cls(images=images, texts=texts, fingerprint=fp)


def build_feature_cache(encoder, dataset: Dataset,
                        batch_size: int = 64) -> FeatureCache:
    """Embed every image (and caption, if present) of a manifest.

    Requires a frozen encoder so the fingerprint stays meaningful for the
    cache's whole lifetime.
    """
    if not encoder.frozen:
        raise EncoderStateError("feature cache requires a frozen encoder")
    ids = dataset.image_ids
    image_rows = []
    for start in range(0, len(ids), batch_size):
        chunk = dataset.records[start:start + batch_size]
        images = [load_image(rec.path) for rec in chunk]
        image_rows.append(encoder.encode_image_batch(images).numpy())
    image_matrix = np.concatenate(image_rows).astype(np.float32)
    if not np.isfinite(image_matrix).all():
        raise ValueError("non-finite image features")
    texts = None
    if dataset.kind == "image-caption":
        text_rows = []
        for start in range(0, len(ids), batch_size):
            chunk = dataset.records[start:start + batch_size]
            caps = [dataset.caption_for(rec.image_id) for rec in chunk]
            text_rows.append(encoder.encode_text_batch(caps).numpy())
        text_matrix = np.concatenate(text_rows).astype(np.float32)
        if not np.isfinite(text_matrix).all():
            raise ValueError("non-finite text features")
        texts = FeatureTable(tuple(ids), text_matrix)
    return FeatureCache(images=FeatureTable(tuple(ids), image_matrix),
                        texts=texts, fingerprint=encoder.fingerprint())


class PretrainedDualEncoder:
    """Adapter for an external CLIP-style checkpoint (full-scale runs only).

    Wraps a ``transformers`` CLIP model so the rest of the toolkit sees the
    same interface as the toy backend. Not exercised in CI: it needs local
    checkpoint weights (ViT-B/16: d_embed 512, ViT-L/14: d_embed 768) and the
    positional embeddings must be interpolated for 384x128 inputs before use.
    """

    def __init__(self, checkpoint_path: str):
        try:
            from transformers import CLIPModel, CLIPTokenizerFast
        except ImportError as exc:  # pragma: no cover - env without transformers
            raise RuntimeError(
                "pretrained backend requires the 'transformers' package") from exc
        self.model = CLIPModel.from_pretrained(checkpoint_path)
        self.model.eval()
        self._hf_tokenizer = CLIPTokenizerFast.from_pretrained(checkpoint_path)
        self.token_table = self.model.text_model.embeddings.token_embedding.weight
        self._frozen = False

    @property
    def d_embed(self) -> int:
        return self.model.config.projection_dim

    @property
    def d_token(self) -> int:
        return self.token_table.shape[1]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self):
        for p in self.model.parameters():
            p.requires_grad_(False)
        self._frozen = True
        return self

    def fingerprint(self) -> bytes:
        return module_fingerprint(self.model, {"backend": "pretrained"})

    def encode_image(self, image) -> torch.Tensor:
        import torchvision.transforms.functional as tf  # local import, heavy
        tensor = tf.to_tensor(image.resize((IMAGE_WIDTH, IMAGE_HEIGHT)))[None]
        with torch.no_grad():
            return self.model.get_image_features(pixel_values=tensor)[0]

    def encode_image_batch(self, images: list) -> torch.Tensor:
        return torch.stack([self.encode_image(im) for im in images])

    def encode_text(self, text: str) -> torch.Tensor:
        enc = self._hf_tokenizer([text], padding="max_length", truncation=True,
                                 max_length=MAX_TOKENS, return_tensors="pt")
        with torch.no_grad():
            return self.model.get_text_features(**enc)[0]

    def encode_text_batch(self, texts: list[str]) -> torch.Tensor:
        return torch.stack([self.encode_text(t) for t in texts])
