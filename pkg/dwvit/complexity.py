"""
Parameter and FLOP accounting.

FLOPs are multiply-accumulates: one MAC counts as one FLOP, and softmax,
normalization, activation and bias costs are left out.
"""

from typing import List, Tuple, Union

from pydantic import BaseModel, model_validator

from dwvit.bypass import extra_flops, extra_params
from dwvit.config import ModelConfig
from dwvit.model import Model

Terms = List[Tuple[str, int]]


class ParamCount(BaseModel):
    backbone: int
    dw: int
    terms: Terms

    @property
    def total(self) -> int:
        return self.backbone + self.dw


class FlopCount(BaseModel):
    backbone: int
    dw: int
    terms: Terms

    @property
    def total(self) -> int:
        return self.backbone + self.dw


class ComplexityReport(BaseModel):
    backbone_params: int
    dw_params: int
    total_params: int
    backbone_flops: int
    dw_flops: int
    total_flops: int
    paper_convention: bool
    param_terms: Terms
    flop_terms: Terms

    @model_validator(mode="after")
    def validate_totals(self) -> "ComplexityReport":
        if self.total_params != self.backbone_params + self.dw_params:
            raise ValueError("total_params must equal backbone_params + dw_params")
        if self.total_flops != self.backbone_flops + self.dw_flops:
            raise ValueError("total_flops must equal backbone_flops + dw_flops")
        return self

    def rows(self) -> List[Tuple[str, str, int]]:
        """``(section, term, value)`` rows for comma-separated output."""
        rows = [("params", name, value) for name, value in self.param_terms]
        rows += [
            ("params", "backbone", self.backbone_params),
            ("params", "dw", self.dw_params),
            ("params", "total", self.total_params),
        ]
        rows += [("flops", name, value) for name, value in self.flop_terms]
        rows += [
            ("flops", "backbone", self.backbone_flops),
            ("flops", "dw", self.dw_flops),
            ("flops", "total", self.total_flops),
        ]
        return rows


def _config_params(config: ModelConfig, paper_convention: bool) -> ParamCount:
    dim, mlp = config.dim, config.mlp_dim
    patch = config.in_channels * config.patch_size**2
    layernorm = 2 * dim
    block = (
        2 * layernorm
        + 4 * (dim * dim + dim)  # q, k, v, out projections
        + dim * mlp + mlp
        + mlp * dim + dim
    )
    terms = [("patch_embed", dim * patch + dim)]
    if config.use_class_token:
        terms.append(("cls_token", dim))
    if config.use_pos_embed:
        terms.append(("pos_embed", config.num_tokens * dim))
    terms += [
        ("blocks", config.depth * block),
        ("norm", layernorm),
        ("head", dim * config.num_classes + config.num_classes),
    ]
    dw = extra_params(
        config.bypass, dim, config.depth, include_batchnorm=not paper_convention
    )
    if dw:
        terms.append(("dw_branches", dw))
    return ParamCount(backbone=sum(v for _, v in terms) - dw, dw=dw, terms=terms)


def _term(name: str) -> str:
    if ".branches." in name:
        return "dw_branches"
    if ".blocks." in name:
        return "blocks"
    if name.startswith("patch_embed.") and not name.startswith("patch_embed.proj."):
        return name.split(".")[1]
    return name.split(".")[0]


def _model_params(model: Model, paper_convention: bool) -> ParamCount:
    totals = {}
    for name, tensor in model.named_parameters():
        if paper_convention and ".branches." in name and ".bn." in name:
            continue
        key = _term(name)
        totals[key] = totals.get(key, 0) + tensor.size
    dw = totals.get("dw_branches", 0)
    return ParamCount(
        backbone=sum(totals.values()) - dw, dw=dw, terms=list(totals.items())
    )


def count_params(target: Union[Model, ModelConfig], paper_convention: bool = True) -> ParamCount:
    """
    Exact parameter count, split into backbone and shortcut branches.

    With ``paper_convention`` the BatchNorm affine parameters inside the
    branches are left out. A ``Model`` is counted by walking its tensors, a
    ``ModelConfig`` by formula; both agree.
    """
    if isinstance(target, Model):
        return _model_params(target, paper_convention)
    return _config_params(target, paper_convention)


def count_flops(config: ModelConfig) -> FlopCount:
    dim, mlp, depth = config.dim, config.mlp_dim, config.depth
    patches, tokens = config.num_patches, config.num_tokens
    terms = [
        ("patch_embed", patches * dim * config.in_channels * config.patch_size**2),
        ("mhsa_projections", depth * 4 * tokens * dim * dim),
        ("mhsa_attention", depth * 2 * tokens * tokens * dim),
        ("ffn", depth * 2 * tokens * dim * mlp),
        ("head", dim * config.num_classes),
    ]
    dw = extra_flops(config.bypass, dim, depth, config.grid, config.grid)
    backbone = sum(v for _, v in terms)
    if dw:
        terms.append(("dw_conv", dw))
    return FlopCount(backbone=backbone, dw=dw, terms=terms)


def complexity_report(config: ModelConfig, paper_convention: bool = True) -> ComplexityReport:
    params = count_params(config, paper_convention)
    flops = count_flops(config)
    return ComplexityReport(
        backbone_params=params.backbone,
        dw_params=params.dw,
        total_params=params.total,
        backbone_flops=flops.backbone,
        dw_flops=flops.dw,
        total_flops=flops.total,
        paper_convention=paper_convention,
        param_terms=params.terms,
        flop_terms=flops.terms,
    )
