"""Operation counting and attention capture.

Multiply-adds are tallied analytically from operand shapes at each named call
site (matmul work only; elementwise maps and normalizations are not
multiply-accumulate work), so scaling assertions are exact up to padding.
Attention dumps expose the latent-token rows for external plotting.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import backbone as bb
from .autograd import ParamStore
from .errors import UsageError
from .geometry import PointCloud, build_neighbor_index, serialize
from .peft import PeftAttachment

Array = np.ndarray


class OpCounter:
    """Per-site multiply-add tallies for one forward pass."""

    def __init__(self):
        self.sites: dict[str, int] = {}

    def add(self, site: str, madds: int) -> None:
        self.sites[site] = self.sites.get(site, 0) + int(madds)

    def reset(self) -> None:
        self.sites.clear()

    def total(self, substring: str = "") -> int:
        return sum(v for k, v in self.sites.items() if substring in k)

    def report_csv(self) -> str:
        rows = ["site,count"]
        rows += [f"{k},{self.sites[k]}" for k in sorted(self.sites)]
        return "\n".join(rows) + "\n"


def _prepare(cloud: PointCloud, bconfig: bb.BackboneConfig, attachment):
    part = serialize(cloud, bconfig.voxel_size, bconfig.patch_size)
    nbr = None
    if attachment is not None and attachment.config.has_spatial:
        nbr = build_neighbor_index(cloud, bconfig.voxel_size)
    return part, nbr


def count_pass(
    cloud: PointCloud,
    store: ParamStore,
    bconfig: bb.BackboneConfig,
    attachment: PeftAttachment | None = None,
) -> OpCounter:
    """Exact multiply-add counts per site for one forward pass."""
    counter = OpCounter()
    part, nbr = _prepare(cloud, bconfig, attachment)
    bb.forward(cloud, part, nbr, attachment, store, bconfig, counter=counter)
    return counter


def js_divergence(p: Array, q: Array) -> float:
    """Jensen-Shannon divergence (natural log) between two distributions."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise UsageError(f"distributions differ in size: {p.size} vs {q.size}")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float((a[mask] * np.log(a[mask] / b[mask])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def dump_attention(
    cloud: PointCloud,
    store: ParamStore,
    bconfig: bb.BackboneConfig,
    attachment: PeftAttachment,
    path,
    command: str = "",
) -> None:
    """Write `token_id,point_id,weight` rows per block.

    Context-adapter methods dump the stage-1 rows (each latent token's
    distribution over all points).  Prompt tuning dumps each point's
    head-averaged attention onto the prompt tokens.  Blocks are separated by
    `# block i` comment lines.
    """
    method = attachment.config.method
    if not attachment.config.has_context and method != "prompt":
        raise UsageError(f"method {method!r} has no global tokens to dump")

    part, nbr = _prepare(cloud, bconfig, attachment)
    lines = []
    if command:
        lines.append(f"# cmd: {command}")
    lines.append(f"# hash: {ag.config_hash({**bconfig.to_dict(), **attachment.config.to_dict()})}")
    lines.append("token_id,point_id,weight")

    if attachment.config.has_context:
        attachment.ca_sink = []
        bb.forward(cloud, part, nbr, attachment, store, bconfig)
        entries, attachment.ca_sink = attachment.ca_sink, None
        for entry in entries:
            lines.append(f"# block {entry['block']}")
            stage1 = entry["stage1"]  # (m, n)
            for t in range(stage1.shape[0]):
                for j in range(stage1.shape[1]):
                    lines.append(f"{t},{j},{float(stage1[t, j])!r}")
    else:
        result = bb.forward(cloud, part, nbr, attachment, store, bconfig, record_attn=True)
        m = attachment.config.tokens
        heads = bconfig.heads
        for block, w in enumerate(result.activations.attn_weights):
            lines.append(f"# block {block}")
            patches = part.num_patches
            per_head = w.reshape(patches, heads, part.patch_size, -1).mean(axis=1)
            for pi in range(patches):
                for slot in range(part.patch_size):
                    point = int(part.index[pi, slot])
                    if point < 0:
                        continue
                    for t in range(m):
                        lines.append(f"{t},{point},{float(per_head[pi, slot, t])!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_attention_dump(path) -> dict[int, dict[int, dict[int, float]]]:
    """Inverse of dump_attention: block -> token -> point -> weight."""
    out: dict[int, dict[int, dict[int, float]]] = {}
    block = -1
    with open(path) as fh:
        for ln in fh:
            ln = ln.strip()
            if ln.startswith("# block "):
                block = int(ln.split()[-1])
                out[block] = {}
            elif ln and not ln.startswith("#") and not ln.startswith("token_id"):
                t, j, w = ln.split(",")
                out[block].setdefault(int(t), {})[int(j)] = float(w)
    return out
