"""Multi-branch model assembly: global branch, input-erased branches, local stripe branch.

Branch order is fixed as ``g, e_1, e_2, ..., l``; the inference embedding
concatenates post-BNNeck features in that order.
"""
from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import Attention
from .erasing import ErasedFeatureMap, ero
from .errors import (
    ConfigInvalid,
    DegenerateBatch,
    IndivisibleHeight,
    NonFiniteInput,
    ShapeMismatch,
)
from .nn import BatchNorm, ConvBlock, Linear, Module, clone_block, conv_out_extent, init_params
from .tensor import Tensor

DEFAULT_ATTENTION = (("g", 2), ("g", 3), ("e_1", 3))


@dataclass
class ModelConfig:
    num_identities: int = 8
    block_widths: tuple[int, ...] = (16, 32, 64, 128)
    block_strides: tuple[int, ...] = (1, 2, 2, 1)
    ie_positions: tuple[int, ...] = (2, 3)
    tau: float = 0.8
    local_branch: bool = True
    local_stripes: int = 4
    attention_sites: tuple[tuple[str, int], ...] = DEFAULT_ATTENTION
    in_channels: int = 3
    image_height: int = 48
    image_width: int = 16

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        self.block_strides = tuple(int(s) for s in self.block_strides)
        self.ie_positions = tuple(sorted(int(p) for p in self.ie_positions))
        self.attention_sites = tuple(sorted((str(b), int(j)) for b, j in self.attention_sites))
        self.tau = float(self.tau)

    @property
    def num_blocks(self) -> int:
        return len(self.block_widths)

    def branch_names(self) -> list[str]:
        names = ["g"] + [f"e_{k}" for k in range(1, len(self.ie_positions) + 1)]
        if self.local_branch:
            names.append("l")
        return names

    def branch_start(self, name: str) -> int:
        """Index of the G-branch output a branch consumes (0 = the image)."""
        if name == "g":
            return 0
        if name == "l":
            return self.num_blocks - 1
        return self.ie_positions[int(name.split("_")[1]) - 1]

    def final_extent(self) -> tuple[int, int]:
        h, w = self.image_height, self.image_width
        for s in self.block_strides:
            h, w = conv_out_extent(h, 3, s, 1), conv_out_extent(w, 3, s, 1)
        return h, w

    def feature_dims(self) -> dict[str, int]:
        final = self.block_widths[-1]
        return {n: final * (self.local_stripes if n == "l" else 1) for n in self.branch_names()}

    def validate(self) -> None:
        b = self.num_blocks
        if b < 2:
            raise ConfigInvalid("block_widths: need at least 2 blocks")
        if len(self.block_strides) != b:
            raise ConfigInvalid("block_strides: length must equal block_widths")
        if any(w < 1 for w in self.block_widths) or any(s < 1 for s in self.block_strides):
            raise ConfigInvalid("block_widths/block_strides: entries must be positive")
        if self.num_identities < 1:
            raise ConfigInvalid("num_identities: must be >= 1")
        if len(set(self.ie_positions)) != len(self.ie_positions):
            raise ConfigInvalid("ie_positions: duplicate position")
        if any(not 1 <= p <= b - 1 for p in self.ie_positions):
            raise ConfigInvalid(f"ie_positions: each position must lie in 1..{b - 1}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigInvalid("tau: must lie in [0, 1]")
        fh, fw = self.final_extent()
        if fh < 1 or fw < 1:
            raise ConfigInvalid("image_height/image_width: too small for the block strides")
        if self.local_branch and (self.local_stripes < 1 or fh % self.local_stripes):
            raise ConfigInvalid(
                f"local_stripes: {self.local_stripes} does not divide final feature height {fh}"
            )
        names = self.branch_names()
        for branch, j in self.attention_sites:
            if branch not in names or branch == "l":
                raise ConfigInvalid(f"attention_sites: no attention allowed on branch {branch!r}")
            if not self.branch_start(branch) < j <= b:
                raise ConfigInvalid(f"attention_sites: branch {branch} has no block {j}")
            if self.block_widths[j - 1] % 16:
                raise ConfigInvalid(f"attention_sites: width {self.block_widths[j - 1]} at block {j} "
                                    "is not divisible by 16")

    # -- key=value serialisation (checkpoints, config files) -------------------
    def to_items(self) -> list[tuple[str, str]]:
        return [
            ("num_identities", str(self.num_identities)),
            ("block_widths", ",".join(map(str, self.block_widths))),
            ("block_strides", ",".join(map(str, self.block_strides))),
            ("ie_positions", ",".join(map(str, self.ie_positions))),
            ("tau", repr(self.tau)),
            ("local_branch", "true" if self.local_branch else "false"),
            ("local_stripes", str(self.local_stripes)),
            ("attention_sites", ",".join(f"{b}:{j}" for b, j in self.attention_sites)),
            ("in_channels", str(self.in_channels)),
            ("image_height", str(self.image_height)),
            ("image_width", str(self.image_width)),
        ]

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        def ints(s):
            return tuple(int(v) for v in s.split(",") if v.strip())

        def sites(s):
            out = []
            for tok in filter(None, (t.strip() for t in s.split(","))):
                branch, _, j = tok.partition(":")
                out.append((branch.strip(), int(j)))
            return tuple(out)

        def flag(s):
            low = s.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {s!r}")
            return low in ("true", "1", "yes", "on")

        parsers = {
            "num_identities": int, "block_widths": ints, "block_strides": ints, "ie_positions": ints,
            "tau": float, "local_branch": flag, "local_stripes": int, "attention_sites": sites,
            "in_channels": int, "image_height": int, "image_width": int,
        }
        kwargs = {}
        for key, value in items.items():
            if key not in parsers:
                raise ConfigInvalid(f"unknown model config key {key!r}")
            try:
                kwargs[key] = parsers[key](value)
            except ValueError as exc:
                raise ConfigInvalid(f"{key}: {exc}") from None
        return cls(**kwargs)


@dataclass
class BranchFeature:
    branch_id: str
    f: Tensor  # raw pooled feature, consumed by triplet and center losses
    f_bn: Tensor  # post-BNNeck feature, used for retrieval
    logits: Tensor


@dataclass
class BranchOutputs:
    features: dict[str, BranchFeature]
    maps: dict[str, Tensor] = field(default_factory=dict)
    erasures: dict[str, ErasedFeatureMap] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.features.values())

    def __len__(self):
        return len(self.features)

    def __getitem__(self, name: str) -> BranchFeature:
        return self.features[name]

    def names(self) -> list[str]:
        return list(self.features)


class BNNeck(Module):
    """BatchNorm with a frozen zero shift, followed by a bias-free classifier."""

    def __init__(self, dim: int, num_classes: int):
        self.bn = BatchNorm(dim, learn_shift=False)
        self.classifier = Linear(dim, num_classes)

    def forward(self, f: Tensor) -> tuple[Tensor, Tensor]:
        f_bn = self.bn(f)
        return f_bn, self.classifier(f_bn)


def bnneck(f, state: BatchNorm, classifier: Linear) -> tuple[Tensor, Tensor]:
    f_bn = state(T.as_tensor(f))
    return f_bn, classifier(f_bn)


def local_head(feat, stripes: int) -> Tensor:
    """Average-pool ``stripes`` horizontal bands and concatenate them top to bottom."""
    feat = T.as_tensor(feat)
    n, c, h, w = feat.shape
    if stripes < 1 or h % stripes:
        raise IndivisibleHeight(f"height {h} cannot be split into {stripes} stripes")
    pooled = feat.reshape(n, c, stripes, h // stripes, w).mean(axis=(3, 4))
    return pooled.transpose(0, 2, 1).reshape(n, stripes * c)


class Branch(Module):
    def __init__(self, name: str, start: int, blocks: list[ConvBlock], attention: dict[str, Attention],
                 neck: BNNeck):
        self.name = name
        self.start = start
        self.blocks = blocks
        self.attention = attention
        self.neck = neck

    def run(self, h: Tensor, keep: dict[int, Tensor] | None = None) -> Tensor:
        for offset, block in enumerate(self.blocks):
            j = self.start + offset + 1
            h = block(h)
            if str(j) in self.attention:
                h = self.attention[str(j)](h)
            if keep is not None:
                keep[j] = h
        return h


def _derive_seed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


@contextlib.contextmanager
def _branch_scope(name: str):
    try:
        yield
    except NonFiniteInput as exc:
        raise NonFiniteInput(f"branch {name}: {exc}") from exc


class DeepMiner(Module):
    """The multi-branch network.  Call ``forward`` (or the instance) on an
    (N, C, H, W) image batch; ``train()``/``eval()`` select the BN mode."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        cfg = config
        widths, strides = cfg.block_widths, cfg.block_strides
        sites = set(cfg.attention_sites)
        dims = cfg.feature_dims()

        g_blocks = []
        prev = cfg.in_channels
        for w, s in zip(widths, strides):
            g_blocks.append(ConvBlock(prev, w, s))
            prev = w
        g_att = {str(j): Attention(widths[j - 1]) for b, j in cfg.attention_sites if b == "g"}
        g = Branch("g", 0, g_blocks, g_att, BNNeck(dims["g"], cfg.num_identities))
        init_params(g, seed)

        self.branches: dict[str, Branch] = {"g": g}
        for k, pos in enumerate(cfg.ie_positions, 1):
            name = f"e_{k}"
            blocks = [clone_block(b) for b in g_blocks[pos:]]
            att = {}
            for j in range(pos + 1, cfg.num_blocks + 1):
                if (name, j) not in sites:
                    continue
                if str(j) in g_att:
                    att[str(j)] = clone_block(g_att[str(j)])
                else:
                    att[str(j)] = init_params(Attention(widths[j - 1]), _derive_seed(seed, f"{name}.att{j}"))
            neck = init_params(BNNeck(dims[name], cfg.num_identities), _derive_seed(seed, f"{name}.neck"))
            self.branches[name] = Branch(name, pos, blocks, att, neck)
        if cfg.local_branch:
            neck = init_params(BNNeck(dims["l"], cfg.num_identities), _derive_seed(seed, "l.neck"))
            self.branches["l"] = Branch("l", cfg.num_blocks - 1, [clone_block(g_blocks[-1])], {}, neck)

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_height, cfg.image_width)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatch(f"expected images of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                                f"got {x.shape}")
        if self.training and x.shape[0] < 2:
            raise DegenerateBatch("train-mode forward needs at least 2 images")

    def forward(self, images) -> BranchOutputs:
        x = T.as_tensor(images)
        self._check_input(x)
        cfg = self.config
        ys: dict[int, Tensor] = {}
        maps: dict[str, Tensor] = {}
        erasures: dict[str, ErasedFeatureMap] = {}
        with _branch_scope("g"):
            maps["g"] = self.branches["g"].run(x, keep=ys)
        for name, branch in self.branches.items():
            if name == "g":
                continue
            with _branch_scope(name):
                source = ys[branch.start]
                if name == "l":
                    maps[name] = branch.run(source)
                else:
                    erased = ero(source, cfg.tau)
                    erasures[name] = erased
                    maps[name] = branch.run(erased.values)

        features = {}
        for name, branch in self.branches.items():
            with _branch_scope(name):
                if name == "l":
                    f = local_head(maps[name], cfg.local_stripes)
                else:
                    f = maps[name].max(axis=(2, 3))
                f_bn, logits = branch.neck(f)
            features[name] = BranchFeature(name, f, f_bn, logits)
        return BranchOutputs(features, maps, erasures)

    def branch_parameters(self, name: str):
        return self.branches[name].parameters()

    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        """Eval-mode embeddings (post-BNNeck, concatenated) for an image array."""
        was_training = self.training
        self.eval()
        try:
            data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
            chunks = []
            with T.no_grad():
                for i in range(0, len(data), batch_size):
                    chunks.append(inference_embedding(self(data[i:i + batch_size])))
            return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.embedding_dim))
        finally:
            self.train(was_training)

    @property
    def embedding_dim(self) -> int:
        return sum(self.config.feature_dims().values())


def build_model(cfg: ModelConfig, seed: int = 0) -> DeepMiner:
    return DeepMiner(cfg, seed)


def inference_embedding(outputs: BranchOutputs) -> np.ndarray:
    return np.concatenate([bf.f_bn.data for bf in outputs], axis=1)
