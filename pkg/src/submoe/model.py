"""Frozen random backbone with mixture-adapter layers spliced in.

The image tower is a stack of frozen affine+tanh layers; selected layers get
a residual mixture adapter appended.  Text embeddings are frozen per-task
label tables carried with the data.  `task=None` routes nothing and replays
the bare backbone (the fallback path for unrecognised inputs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import ForwardCache, MixtureAdapterLayer, RoutingDistribution
from .errors import ConfigError, DimensionError
from .numerics import as_matrix, contrastive_loss, require_finite


@dataclass
class FrozenBackbone:
    weights: list[np.ndarray]  # per layer, [dim, dim]
    biases: list[np.ndarray]   # per layer, [dim]

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    def layer_forward(self, i: int, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.weights[i].T + self.biases[i])


def build_backbone(dim: int, depth: int, seed: int) -> FrozenBackbone:
    """Orthogonal frozen layers keep activation norms stable through tanh."""
    if dim < 1 or depth < 1:
        raise ConfigError(f"model.feature_dim/depth: must be >= 1, got {dim}/{depth}")
    rng = np.random.default_rng(np.random.SeedSequence([11, seed]))
    weights, biases = [], []
    for _ in range(depth):
        raw = rng.standard_normal((dim, dim))
        q, r = np.linalg.qr(raw)
        signs = np.sign(np.diag(r))
        signs[signs == 0.0] = 1.0
        weights.append(q * signs)
        biases.append(0.1 * rng.standard_normal(dim))
    return FrozenBackbone(weights=weights, biases=biases)


@dataclass
class LayerGrads:
    layer_index: int
    expert_grads: list[tuple[np.ndarray, np.ndarray]]
    router_grad: np.ndarray
    dist: RoutingDistribution


@dataclass
class AdapterModel:
    backbone: FrozenBackbone
    adapters: dict[int, MixtureAdapterLayer]
    temperature: float
    learned_tasks: list[int] = field(default_factory=list)
    phase: dict[int, str] = field(default_factory=dict)
    current_task: int | None = None

    @property
    def dim(self) -> int:
        return self.backbone.dim

    def adapter_layers(self) -> list[MixtureAdapterLayer]:
        return [self.adapters[i] for i in sorted(self.adapters)]

    def _forward(self, x, task: int | None, keep_tape: bool):
        h = as_matrix(x)
        if h.shape[1] != self.dim:
            raise DimensionError(f"input width {h.shape[1]}, backbone dim {self.dim}")
        require_finite("model input", h)
        tape = [] if keep_tape else None
        for i in range(self.backbone.depth):
            t = self.backbone.layer_forward(i, h)
            cache: ForwardCache | None = None
            if task is not None and i in self.adapters:
                h, _, cache = self.adapters[i].forward(task, t)
            else:
                h = t
            if keep_tape:
                tape.append((t, cache))
        return h, tape

    def embed(self, x, task: int | None) -> np.ndarray:
        emb, _ = self._forward(x, task, keep_tape=False)
        return emb

    def logits(self, x, text_emb, task: int | None) -> np.ndarray:
        """Cosine similarities of embeddings against label rows."""
        emb = self.embed(x, task)
        txt = as_matrix(text_emb)
        e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        t = txt / np.linalg.norm(txt, axis=1, keepdims=True)
        return e @ t.T

    def predict(self, x, text_emb, task: int | None) -> np.ndarray:
        return self.logits(x, text_emb, task).argmax(axis=1)

    def loss_and_grads(self, x, labels, text_emb, task: int):
        """Contrastive loss plus analytic gradients for every adapter layer.

        Returns (loss, grads) with one LayerGrads per adapter layer in layer
        order; frozen experts' gradients are included for inspection and must
        not be applied.
        """
        emb, tape = self._forward(x, task, keep_tape=True)
        loss, g = contrastive_loss(emb, text_emb, labels, self.temperature)
        per_layer: dict[int, LayerGrads] = {}
        for i in range(self.backbone.depth - 1, -1, -1):
            t, cache = tape[i]
            if cache is not None:
                layer = self.adapters[i]
                g, expert_grads, router_grad = layer.backward(cache, g)
                per_layer[i] = LayerGrads(
                    layer_index=i, expert_grads=expert_grads,
                    router_grad=router_grad, dist=cache.dist,
                )
            g = (g * (1.0 - t * t)) @ self.backbone.weights[i]
        return loss, [per_layer[i] for i in sorted(per_layer)]

    def routing_snapshot(self, x, labels, text_emb, task: int):
        """Eval-batch loss plus per-adapter-layer mean routing distributions."""
        h = as_matrix(x)
        layer_weights, layer_probs = [], []
        for i in range(self.backbone.depth):
            t = self.backbone.layer_forward(i, h)
            if i in self.adapters:
                h, dist, _ = self.adapters[i].forward(task, t)
                layer_weights.append(dist.mean_weights())
                layer_probs.append(dist.mean_probs())
            else:
                h = t
        loss, _ = contrastive_loss(h, text_emb, labels, self.temperature)
        return loss, layer_weights, layer_probs

    def expert_counts(self) -> dict[int, int]:
        return {i: len(self.adapters[i].experts) for i in sorted(self.adapters)}


def build_model(dim: int, depth: int, adapter_layers: list[int], rank: int,
                top_k: int, temperature: float, seed: int) -> AdapterModel:
    if not adapter_layers:
        raise ConfigError("model.adapter_layers: need at least one adapter position")
    for i in adapter_layers:
        if not (0 <= i < depth):
            raise ConfigError(f"model.adapter_layers: index {i} outside [0, {depth})")
    if len(set(adapter_layers)) != len(adapter_layers):
        raise ConfigError("model.adapter_layers: duplicate layer index")
    if rank < 1:
        raise ConfigError(f"model.rank: must be >= 1, got {rank}")
    if top_k < 1:
        raise ConfigError(f"schedule.top_k: must be >= 1, got {top_k}")
    if temperature <= 0.0:
        raise ConfigError(f"contrastive.temperature: must be positive, got {temperature}")
    backbone = build_backbone(dim, depth, seed)
    adapters = {
        i: MixtureAdapterLayer(layer_index=i, dim=dim, rank=rank, top_k=top_k)
        for i in adapter_layers
    }
    return AdapterModel(backbone=backbone, adapters=adapters, temperature=temperature)


def trainable_stage1_params(model: AdapterModel, task: int) -> int:
    """Parameter count optimised while fitting routing for `task`: candidate
    experts plus the task's routers."""
    total = 0
    for layer in model.adapter_layers():
        for e in layer.candidates(task):
            total += e.down.size + e.up.size
        total += layer.router_for(task).weight.size
    return total


def frozen_fingerprint(model: AdapterModel, exclude_task: int | None = None) -> dict:
    """Byte-level fingerprint of every parameter not owned by `exclude_task`;
    used to assert that training leaves frozen state untouched."""
    fp = {}
    for i, layer in enumerate(model.adapter_layers()):
        for e in layer.experts:
            if exclude_task is not None and e.owner_task == exclude_task:
                continue
            fp[("expert", i, e.expert_id, "down")] = e.down.tobytes()
            fp[("expert", i, e.expert_id, "up")] = e.up.tobytes()
        for t, r in layer.routers.items():
            if exclude_task is not None and t == exclude_task:
                continue
            fp[("router", i, t)] = r.weight.tobytes()
    for j, w in enumerate(model.backbone.weights):
        fp[("backbone", j, "w")] = w.tobytes()
        fp[("backbone", j, "b")] = model.backbone.biases[j].tobytes()
    return fp
