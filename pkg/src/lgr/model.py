"""Desk-scale landmark detector.

Stride-2 conv blocks produce a feature map; after block ``inject_after_block``
a stack of LGR layers refines it, each followed by residual addition and a
two-scale pyramid; the remaining conv blocks run and a 1×1 conv + sigmoid
head emits one heatmap per leaf landmark.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DimensionError
from .graph import LayoutGraph, build_hierarchy, get_hierarchy
from .layer import LgrOptions, init_lgr_params, lgr_forward, orthogonality_penalty, param_shapes
from .tensor import Tensor

ModelParams = dict[str, np.ndarray]

HEAD_PRIOR = 0.1


def graph_for(config: ModelConfig) -> LayoutGraph:
    graph = build_hierarchy(get_hierarchy(config.hierarchy))
    config.validate(graph.depth)
    return graph


def stack_prefix(s: int) -> str:
    return f"stack{s}."


def init_params(config: ModelConfig, seed: int, graph: LayoutGraph | None = None) -> ModelParams:
    """Deterministic initial parameters for ``config`` from ``seed``."""
    graph = graph or graph_for(config)
    config.validate(graph.depth)
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    cin = 3
    for i, cout in enumerate(config.channels):
        bound = np.sqrt(6.0 / (9 * cin))  # He-uniform keeps relu activations from shrinking
        params[f"backbone{i}.w"] = rng.uniform(-bound, bound, size=(3, 3, cin, cout))
        params[f"backbone{i}.b"] = np.zeros(cout)
        cin = cout
    C = config.lgr_channels
    opts = LgrOptions.from_model(config)
    for s in range(config.num_stacks):
        for k, v in init_lgr_params(graph, C, config.d, opts, rng).items():
            params[stack_prefix(s) + k] = v
        if config.pyramid_enabled:
            bound = np.sqrt(1.0 / C)
            params[f"stack{s}.pyr.w"] = rng.uniform(-bound, bound, size=(C, C))
            params[f"stack{s}.pyr.b"] = np.zeros(C)
    bound = np.sqrt(1.0 / config.C)
    params["head.w"] = rng.uniform(-bound, bound, size=(config.C, graph.n_leaf))
    # start the sigmoid near the mostly-background target mean instead of 0.5
    params["head.b"] = np.full(graph.n_leaf, np.log(HEAD_PRIOR / (1 - HEAD_PRIOR)))
    return params


def expected_shapes(config: ModelConfig, graph: LayoutGraph) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = 3
    for i, cout in enumerate(config.channels):
        shapes[f"backbone{i}.w"] = (3, 3, cin, cout)
        shapes[f"backbone{i}.b"] = (cout,)
        cin = cout
    C = config.lgr_channels
    for s in range(config.num_stacks):
        for k, v in param_shapes(graph, C, config.d, LgrOptions.from_model(config)).items():
            shapes[stack_prefix(s) + k] = v
        if config.pyramid_enabled:
            shapes[f"stack{s}.pyr.w"] = (C, C)
            shapes[f"stack{s}.pyr.b"] = (C,)
    shapes["head.w"] = (config.C, graph.n_leaf)
    shapes["head.b"] = (graph.n_leaf,)
    return shapes


def stack_params(p: Mapping[str, Tensor], s: int) -> dict[str, Tensor]:
    pre = stack_prefix(s)
    return {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}


def backbone_block(x: Tensor, p: Mapping[str, Tensor], i: int) -> Tensor:
    return T.relu(T.conv2d(x, p[f"backbone{i}.w"], p[f"backbone{i}.b"], stride=2, padding=1))


def backbone_forward(image, p: Mapping[str, Tensor], config: ModelConfig, blocks: range | None = None) -> Tensor:
    """Run conv blocks (all by default) on B×H×W×3 images in [0, 1]."""
    x = T.as_tensor(image)
    if blocks is None or blocks.start == 0:
        if x.ndim != 4 or x.shape[1:] != (config.input_size, config.input_size, 3):
            raise DimensionError(f"expected images of shape (B, {config.input_size}, {config.input_size}, 3), got {x.shape}")
    for i in blocks if blocks is not None else range(len(config.channels)):
        x = backbone_block(x, p, i)
    return x


def pyramid_post(F: Tensor, p: Mapping[str, Tensor], s: int, enabled: bool = True) -> Tensor:
    """relu(F + conv1×1(upsample(avgpool2(F)))) on B×H×W×C; identity when disabled."""
    if not enabled:
        return F
    coarse = T.upsample2(T.avg_pool2(F))
    return T.relu(T.add(F, T.add(coarse @ p[f"stack{s}.pyr.w"], p[f"stack{s}.pyr.b"])))


def lgr_stack(F: Tensor, p: Mapping[str, Tensor], config: ModelConfig, graph: LayoutGraph) -> Tensor:
    opts = LgrOptions.from_model(config)
    B, H, W, C = F.shape
    for s in range(config.num_stacks):
        flat = T.reshape(F, (B, H * W, C))
        Fr = T.reshape(lgr_forward(flat, graph, stack_params(p, s), opts), (B, H, W, C))
        if config.residual_after_pyramid:
            F = T.add(F, pyramid_post(Fr, p, s, config.pyramid_enabled))
        else:
            F = pyramid_post(T.add(F, Fr), p, s, config.pyramid_enabled)
    return F


def head(F: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return T.sigmoid(T.add(F @ p["head.w"], p["head.b"]))


def model_forward(image, p: Mapping[str, Tensor], config: ModelConfig, graph: LayoutGraph) -> Tensor:
    """Heatmaps B×h×w×N_leaf in (0, 1) at feature resolution (input/2^blocks).

    A single H×W×3 image gives an h×w×N_leaf result.
    """
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1, *x.shape))
    k = config.inject_after_block
    F = backbone_forward(x, p, config, range(0, k))
    F = lgr_stack(F, p, config, graph)
    F = backbone_forward(F, p, config, range(k, len(config.channels)))
    out = head(F, p)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def total_orthogonality(p: Mapping[str, Tensor], config: ModelConfig, graph: LayoutGraph) -> Tensor:
    opts = LgrOptions.from_model(config)
    total = T.as_tensor(0.0)
    for s in range(config.num_stacks):
        total = T.add(total, orthogonality_penalty(stack_params(p, s), graph, opts))
    return total
