"""Token-guided 2D patch distillation.

Each model's BEV feature map is cut into non-overlapping ``s x s`` patches,
every patch is projected to a shared width ``D``, and a global token (the
projected channel means) is prepended.  Single-head self-attention over that
sequence gives a token-to-token distribution per row.  The student is pulled
toward each reference model by the KL divergence between temperature-softened
attention rows plus a weighted MSE between the token sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .nets import BEV_WIDTH, ParamStore


@dataclass
class TokenState:
    patches: Tensor      # (B, N, D)
    glob: Tensor         # (B, 1, D)
    seq: Tensor          # (B, N + 1, D), global token first
    attn_logits: Tensor  # (B, N + 1, N + 1), QK^T / sqrt(D)
    attn: Tensor         # row softmax of attn_logits

    @property
    def length(self) -> int:
        return self.seq.shape[1]

    def detached(self) -> "TokenState":
        return TokenState(*(Tensor(t.data) for t in
                            (self.patches, self.glob, self.seq, self.attn_logits, self.attn)))


@dataclass
class TgpdParams:
    patch_size: int = 4
    embed_dim: int = 32
    temperature: float = 1.0
    mse_weight: float = 1.0
    stores: dict[str, ParamStore] = field(default_factory=dict)

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        dims = {s["patch.w"].shape[1] for s in self.stores.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding width differs across models: {sorted(dims)}")


def init_projection(channels: int, patch_size: int, embed_dim: int, seed: int, key: int = 0) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7919, key]))
    store = ParamStore()
    fan = channels * patch_size * patch_size
    store.add("patch.w", rng.normal(0, 1 / math.sqrt(fan), (fan, embed_dim)))
    store.add("patch.b", np.zeros(embed_dim))
    store.add("token.w", rng.normal(0, 1 / math.sqrt(channels), (channels, embed_dim)))
    store.add("token.b", np.zeros(embed_dim))
    for name in ("wq", "wk", "wv"):
        store.add(name, rng.normal(0, 1 / math.sqrt(embed_dim), (embed_dim, embed_dim)))
    return store


def init_tgpd(seed: int, roles=("student", "teacher", "coach"), patch_size: int = 4,
              embed_dim: int = 32, temperature: float = 1.0, mse_weight: float = 1.0) -> TgpdParams:
    keys = {"student": 0, "teacher": 1, "coach": 2}
    stores = {r: init_projection(BEV_WIDTH[r], patch_size, embed_dim, seed, keys[r]) for r in roles}
    params = TgpdParams(patch_size, embed_dim, temperature, mse_weight, stores)
    params.validate()
    return params


def tokenize(feat: Tensor, store: ParamStore, patch_size: int) -> TokenState:
    B, C, H, W = feat.shape
    if H % patch_size or W % patch_size:
        raise ShapeError("tokenize", feat.shape, (patch_size, patch_size),
                         "BEV dims must be divisible by the patch size")
    if store["patch.w"].shape[0] != C * patch_size * patch_size:
        raise ShapeError("tokenize", feat.shape, store["patch.w"].shape, "projection width")
    patches = dc.linear(dc.patchify(feat, patch_size), store["patch.w"], store["patch.b"])
    D = patches.shape[-1]
    glob = dc.reshape(dc.linear(dc.avg_pool_full(feat), store["token.w"], store["token.b"]), (B, 1, D))
    seq = dc.concat([glob, patches], axis=1)
    attn, logits, _ = dc.scaled_dot_attention(seq, store["wq"], store["wk"])
    return TokenState(patches, glob, seq, logits, attn)


def pair_terms(stu: TokenState, ref: TokenState, tau: float) -> tuple[Tensor, Tensor]:
    """(KL term, MSE term) of the student against one reference."""
    if stu.seq.shape != ref.seq.shape:
        raise ShapeError("tgpd_pair_loss", stu.seq.shape, ref.seq.shape, "token sequences differ")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    ref_logits = ref.attn_logits.data
    log_ref = ref_logits / tau
    log_ref = log_ref - log_ref.max(axis=-1, keepdims=True)
    log_ref = log_ref - np.log(np.exp(log_ref).sum(axis=-1, keepdims=True))
    log_stu = dc.log_softmax_rows(stu.attn_logits, tau)
    # rows can round to about -1e-30 when the two distributions coincide
    kl_rows = dc.relu(dc.sum(dc.exp(log_stu) * (log_stu - log_ref), axis=-1))
    kl = dc.mean(kl_rows)
    mse = dc.mean(dc.square(stu.seq - ref.seq.data))
    return kl, mse


def tgpd_pair_loss(stu: TokenState, ref: TokenState, tau: float = 1.0, mse_weight: float = 1.0) -> Tensor:
    kl, mse = pair_terms(stu, ref, tau)
    return kl + mse * mse_weight


def tgpd_total(stu: TokenState, tea: TokenState, coa: TokenState | None,
               beta1: float, beta2: float, tau: float = 1.0, mse_weight: float = 1.0) -> Tensor:
    """Weighted teacher and coach terms; ``coa=None`` drops the coach branch."""
    loss = tgpd_pair_loss(stu, tea, tau, mse_weight) * beta1
    if coa is not None:
        loss = loss + tgpd_pair_loss(stu, coa, tau, mse_weight) * beta2
    return loss
