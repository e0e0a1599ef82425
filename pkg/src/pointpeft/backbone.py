"""Miniature point-cloud transformer.

Per-point embedding, a learned positional MLP, B pre-norm blocks of local
patch attention plus FFN, and a linear segmentation head.  Adaptation hooks
are invoked at fixed insertion points so attachment modules can graft extra
branches without touching frozen weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParamStore, Tensor
from .errors import ContractError, ShapeError, UsageError
from .geometry import NeighborIndex, PatchPartition, PointCloud

Array = np.ndarray

LN_EPS = 1e-5


def _even_stages(blocks: int, want: int = 4) -> tuple[tuple[int, int], ...]:
    count = min(want, blocks)
    bounds = np.linspace(0, blocks, count + 1).astype(int)
    return tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a)


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the toy transformer; `stages` labels contiguous block ranges."""

    d: int = 64
    blocks: int = 8
    patch_size: int = 16
    heads: int = 4
    ffn_mult: int = 4
    num_classes: int = 3
    in_channels: int = 6
    voxel_size: float = 0.5
    stages: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.d % self.heads != 0:
            raise UsageError(f"d={self.d} not divisible by heads={self.heads}")
        if self.blocks < 1:
            raise UsageError("blocks must be >= 1")
        if self.voxel_size <= 0:
            raise UsageError("voxel_size must be positive")
        if not self.stages:
            object.__setattr__(self, "stages", _even_stages(self.blocks))
        covered = [i for a, b in self.stages for i in range(a, b)]
        if covered != list(range(self.blocks)):
            raise UsageError(f"stages {self.stages} do not partition [0, {self.blocks})")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_of(self, block: int) -> int:
        for s, (a, b) in enumerate(self.stages):
            if a <= block < b:
                return s
        raise UsageError(f"block {block} outside [0, {self.blocks})")

    def to_dict(self) -> dict[str, str]:
        return {
            "d": str(self.d),
            "blocks": str(self.blocks),
            "patch_size": str(self.patch_size),
            "heads": str(self.heads),
            "ffn_mult": str(self.ffn_mult),
            "num_classes": str(self.num_classes),
            "in_channels": str(self.in_channels),
            "voxel_size": repr(float(self.voxel_size)),
            "stages": ",".join(f"{a}:{b}" for a, b in self.stages),
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "BackboneConfig":
        try:
            stages = tuple(
                (int(a), int(b))
                for a, b in (pair.split(":") for pair in str(cfg["stages"]).split(","))
            )
            return cls(
                d=int(cfg["d"]),
                blocks=int(cfg["blocks"]),
                patch_size=int(cfg["patch_size"]),
                heads=int(cfg["heads"]),
                ffn_mult=int(cfg["ffn_mult"]),
                num_classes=int(cfg["num_classes"]),
                in_channels=int(cfg["in_channels"]),
                voxel_size=float(cfg["voxel_size"]),
                stages=stages,
            )
        except (KeyError, ValueError) as exc:
            raise ContractError(f"malformed backbone config: {exc}") from exc


def _param_plan(config: BackboneConfig):
    """(name, shape, init) triples; init is a fan-in, "zeros", or "ones"."""
    d, c, h = config.d, config.in_channels, config.ffn_mult * config.d
    plan = [
        ("backbone.embed.weight", (c, d), c),
        ("backbone.embed.bias", (d,), "zeros"),
        ("backbone.pos.w1", (3, d), 3),
        ("backbone.pos.b1", (d,), "zeros"),
        ("backbone.pos.w2", (d, d), d),
        ("backbone.pos.b2", (d,), "zeros"),
    ]
    for i in range(config.blocks):
        pre = f"backbone.block{i}"
        plan += [
            (f"{pre}.ln1.scale", (d,), "ones"),
            (f"{pre}.ln1.shift", (d,), "zeros"),
            (f"{pre}.attn.q.weight", (d, d), d),
            (f"{pre}.attn.q.bias", (d,), "zeros"),
            (f"{pre}.attn.k.weight", (d, d), d),
            (f"{pre}.attn.k.bias", (d,), "zeros"),
            (f"{pre}.attn.v.weight", (d, d), d),
            (f"{pre}.attn.v.bias", (d,), "zeros"),
            (f"{pre}.attn.out.weight", (d, d), d),
            (f"{pre}.attn.out.bias", (d,), "zeros"),
            (f"{pre}.ln2.scale", (d,), "ones"),
            (f"{pre}.ln2.shift", (d,), "zeros"),
            (f"{pre}.ffn.fc1.weight", (d, h), d),
            (f"{pre}.ffn.fc1.bias", (h,), "zeros"),
            (f"{pre}.ffn.fc2.weight", (h, d), h),
            (f"{pre}.ffn.fc2.bias", (d,), "zeros"),
        ]
    plan += [
        ("backbone.ln_out.scale", (d,), "ones"),
        ("backbone.ln_out.shift", (d,), "zeros"),
        ("head.weight", (d, config.num_classes), d),
        ("head.bias", (config.num_classes,), "zeros"),
    ]
    return plan


def expected_layout(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape for name, shape, _ in _param_plan(config)}


def init_backbone(config: BackboneConfig, seed: int) -> ParamStore:
    """Fresh trainable parameters, deterministic in the seed."""
    rng = ag.named_rng(seed, "init")
    store = ParamStore()
    for name, shape, init in _param_plan(config):
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(init)
            data = rng.uniform(-bound, bound, shape)
        store.add(name, data)
    return store


def linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return ag.add(ag.matmul(x, store[f"{prefix}.weight"]), store[f"{prefix}.bias"])


def layer_norm(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    mu = ag.tmean(x, axis=-1, keepdims=True)
    centered = ag.sub(x, mu)
    var = ag.tmean(ag.mul(centered, centered), axis=-1, keepdims=True)
    inv = ag.pow_const(ag.add(var, LN_EPS), -0.5)
    return ag.add(
        ag.mul(ag.mul(centered, inv), store[f"{prefix}.scale"]),
        store[f"{prefix}.shift"],
    )


def embed(cloud: PointCloud, store: ParamStore) -> Tensor:
    weight = store["backbone.embed.weight"]
    if cloud.c != weight.shape[0]:
        raise ShapeError(
            f"cloud has {cloud.c} feature channels, embedding expects {weight.shape[0]}"
        )
    return ag.add(ag.matmul(Tensor(cloud.feats), weight), store["backbone.embed.bias"])


def pos_encode(coords: Tensor, store: ParamStore) -> Tensor:
    hidden = ag.relu(ag.add(ag.matmul(coords, store["backbone.pos.w1"]), store["backbone.pos.b1"]))
    return ag.add(ag.matmul(hidden, store["backbone.pos.w2"]), store["backbone.pos.b2"])


def ffn(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    hidden = ag.relu(linear(x, store, f"{prefix}.fc1"))
    return ag.add(ag.matmul(hidden, store[f"{prefix}.fc2.weight"]), store[f"{prefix}.fc2.bias"])


@dataclass
class AttnMods:
    """Attachment-supplied modifications applied inside local attention."""

    lora_q: tuple[Tensor, Tensor] | None = None  # (down d x r, up r x d)
    lora_k: tuple[Tensor, Tensor] | None = None
    prompt_k: Tensor | None = None  # m x d, prepended as extra keys
    prompt_v: Tensor | None = None
    prompt_logit_bias: float = 0.0  # test hook: large negative masks prompts out
    site: str = ""


MASK_LOGIT = -1e30  # underflows to an exactly-zero weight after the max shift


def _split_heads(t: Tensor, heads: int) -> Tensor:
    """(P, s, d) -> (P*heads, s, d/heads)."""
    patches, s, d = t.shape
    t = ag.reshape(t, (patches, s, heads, d // heads))
    t = ag.transpose(t, (0, 2, 1, 3))
    return ag.reshape(t, (patches * heads, s, d // heads))


def local_attention(
    x: Tensor,
    part: PatchPartition,
    store: ParamStore,
    prefix: str,
    heads: int,
    mods: AttnMods | None = None,
    counter=None,
    site: str = "",
    record=None,
) -> Tensor:
    """Multi-head scaled dot-product attention independently inside each patch.

    Padded slots are masked out before the softmax and dropped from the
    output; rows come back in original point order.
    """
    n, d = x.shape
    if part.n != n:
        raise ContractError(f"partition built for {part.n} points, got {n}")
    if d % heads != 0:
        raise ContractError(f"width {d} not divisible by {heads} heads")
    patches, p = part.num_patches, part.patch_size
    dh = d // heads

    q = linear(x, store, f"{prefix}.q")
    k = linear(x, store, f"{prefix}.k")
    v = linear(x, store, f"{prefix}.v")
    if counter is not None:
        counter.add(f"{site}.attn_proj", 4 * n * d * d)
    if mods is not None and mods.lora_q is not None:
        down, up = mods.lora_q
        q = ag.add(q, ag.matmul(ag.matmul(x, down), up))
        down, up = mods.lora_k
        k = ag.add(k, ag.matmul(ag.matmul(x, down), up))
        if counter is not None:
            counter.add(f"{mods.site}.lora", 4 * n * d * down.shape[1])

    flat_idx = part.index.ravel()
    qp = _split_heads(ag.reshape(ag.gather_rows(q, flat_idx), (patches, p, d)), heads)
    kp = _split_heads(ag.reshape(ag.gather_rows(k, flat_idx), (patches, p, d)), heads)
    vp = _split_heads(ag.reshape(ag.gather_rows(v, flat_idx), (patches, p, d)), heads)

    m = 0
    if mods is not None and mods.prompt_k is not None:
        m = mods.prompt_k.shape[0]

        def per_patch(tokens: Tensor) -> Tensor:
            t = ag.transpose(ag.reshape(tokens, (m, heads, dh)), (1, 0, 2))
            return ag.reshape(ag.expand_batch(t, patches), (patches * heads, m, dh))

        kp = ag.concat([per_patch(mods.prompt_k), kp], axis=1)
        vp = ag.concat([per_patch(mods.prompt_v), vp], axis=1)

    logits = ag.mul(ag.matmul(qp, ag.transpose(kp, (0, 2, 1))), 1.0 / math.sqrt(dh))
    mask = np.zeros((patches, 1, m + p))
    mask[:, 0, m:][part.pad_mask] = MASK_LOGIT
    if m and mods.prompt_logit_bias:
        mask[:, 0, :m] = mods.prompt_logit_bias
    logits = ag.add(logits, Tensor(np.repeat(mask, heads, axis=0)))
    weights = ag.softmax_rows(logits)
    if record is not None:
        record(weights.data)
    if counter is not None:
        counter.add(f"{site}.local_attn", 2 * patches * heads * p * (m + p) * dh)

    out = ag.matmul(weights, vp)  # (patches*heads, p, dh)
    out = ag.reshape(ag.transpose(ag.reshape(out, (patches, heads, p, dh)), (0, 2, 1, 3)), (patches * p, d))
    slot_of_point = np.empty(n, dtype=np.int64)
    valid = flat_idx >= 0
    slot_of_point[flat_idx[valid]] = np.nonzero(valid)[0]
    gathered = ag.gather_rows(out, slot_of_point)
    return linear(gathered, store, f"{prefix}.out")


@dataclass
class BlockActivations:
    """Per-block intermediate activations, detached for inspection."""

    inputs: list[Array] = field(default_factory=list)
    post_attn: list[Array] = field(default_factory=list)
    post_ffn: list[Array] = field(default_factory=list)
    attn_weights: list[Array] | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    activations: BlockActivations
    latent: object | None


def forward(
    cloud: PointCloud,
    part: PatchPartition,
    nbr: NeighborIndex | None,
    attachment,
    store: ParamStore,
    config: BackboneConfig,
    latent=None,
    counter=None,
    record_attn: bool = False,
) -> ForwardResult:
    """Full pass: embed, positional refinement, B blocks, segmentation head.

    `attachment` is any object exposing the insertion-point hooks
    (new_latent, input_branch, attention_mods, context_branch, ffn_post),
    or None for the plain frozen path.
    """
    n = cloud.n
    if part.n != n:
        raise ContractError(f"partition covers {part.n} points, cloud has {n}")
    if nbr is not None and nbr.num_points != n:
        raise ContractError(f"neighbor index covers {nbr.num_points} points, cloud has {n}")

    x0 = embed(cloud, store)
    if counter is not None:
        counter.add("embed", n * cloud.c * config.d)
    x = ag.add(x0, pos_encode(Tensor(cloud.coords), store))
    if counter is not None:
        counter.add("pos", n * 3 * config.d + n * config.d * config.d)
    if attachment is not None:
        branch = attachment.input_branch(x0, nbr, counter)
        if branch is not None:
            x = ag.add(x, branch)
        if latent is None:
            latent = attachment.new_latent()

    acts = BlockActivations(attn_weights=[] if record_attn else None)
    for i in range(config.blocks):
        acts.inputs.append(x.data.copy())
        xn = layer_norm(x, store, f"backbone.block{i}.ln1")
        mods = attachment.attention_mods(i) if attachment is not None else None
        record = acts.attn_weights.append if record_attn else None
        attn = local_attention(
            xn,
            part,
            store,
            f"backbone.block{i}.attn",
            config.heads,
            mods=mods,
            counter=counter,
            site=f"block{i}",
            record=record,
        )
        x = ag.add(x, attn)
        if attachment is not None:
            branch, latent = attachment.context_branch(xn, i, latent, counter)
            if branch is not None:
                x = ag.add(x, branch)
        acts.post_attn.append(x.data.copy())
        x = ag.add(x, ffn(layer_norm(x, store, f"backbone.block{i}.ln2"), store, f"backbone.block{i}.ffn"))
        if counter is not None:
            counter.add(f"block{i}.ffn", 2 * n * config.d * config.ffn_mult * config.d)
        if attachment is not None:
            x = attachment.ffn_post(x, i, counter)
        acts.post_ffn.append(x.data.copy())

    logits = linear(layer_norm(x, store, "backbone.ln_out"), store, "head")
    if counter is not None:
        counter.add("head", n * config.d * config.num_classes)
    return ForwardResult(logits=logits, activations=acts, latent=latent)


def save_backbone(path, store: ParamStore, config: BackboneConfig, command: str | None = None) -> None:
    ag.save_checkpoint(path, store, config.to_dict(), command)


def load_backbone(path) -> tuple[BackboneConfig, ParamStore]:
    cfg, store = ag.load_checkpoint(path)
    config = BackboneConfig.from_dict(cfg)
    ag.validate_store_layout(store, expected_layout(config))
    return config, store
