from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Model widths and depths. Defaults are desk scale; the full model uses
    d=128, cls_tokens=4, blocks 3/3/12, heads 8/8/4, 128 inducing points and
    999 quantiles."""

    d: int = 32
    cls_tokens: int = 2
    col_blocks: int = 2
    row_blocks: int = 2
    icl_blocks: int = 4
    col_heads: int = 4
    row_heads: int = 4
    icl_heads: int = 4
    inducing: int = 16
    ff_mult: int = 2
    rope_base: float = 100000.0
    n_quantiles: int = 99
    max_classes: int = 10
    softcap: float = 30.0
    qassmax_cmax: float = 10.0
    qassmax_hidden: int = 16
    norm_eps: float = 1e-6

    def __post_init__(self):
        for heads in (self.col_heads, self.row_heads):
            if self.d % heads:
                raise ValueError(f"d={self.d} is not divisible by {heads} heads")
            if (self.d // heads) % 2:
                raise ValueError("row-attention head width must be even for rotary embeddings")
        if self.icl_dim % self.icl_heads:
            raise ValueError(f"ICL width {self.icl_dim} is not divisible by {self.icl_heads} heads")
        if self.n_quantiles < 1 or self.cls_tokens < 1:
            raise ValueError("n_quantiles and cls_tokens must be positive")

    @property
    def icl_dim(self) -> int:
        return self.d * self.cls_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)
