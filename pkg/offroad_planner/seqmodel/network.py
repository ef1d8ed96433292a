"""
Action-conditioned sequence model: a causal transformer and an LSTM baseline.

Token 0 is the encoded observation; token t+1 embeds action row t as
(delta, throttle, dt) plus a sinusoidal position code. The prediction for
step t is read from token t+1, so it sees the observation and action rows
0..t only.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from offroad_planner.errors import DomainError, InferenceError
from offroad_planner.seqmodel.tape import HALF_LOG_2PI, GradTape, Node
from offroad_planner.seqmodel.types import (
    ACTION_DIM,
    ModelConfig,
    ModelWeights,
    StepPrediction,
    expected_shapes,
)

logger = logging.getLogger(__name__)

LSTM_FORGET_BIAS = 1.0


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Glorot-normal matrices, unit norm gains, zero biases (forget gate biased open)."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if len(shape) == 2:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            tensors[name] = rng.normal(0.0, std, size=shape)
        elif name.endswith(".g"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
        if config.architecture == "lstm" and name.startswith("block") and name.endswith(".b"):
            w = config.width
            tensors[name][w:2 * w] = LSTM_FORGET_BIAS
    return ModelWeights(config=config, tensors=tensors, seed=int(seed))


def positional_encoding(steps: int, width: int) -> np.ndarray:
    """Sinusoidal position code of shape (steps, width)."""
    pos = np.arange(steps)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class GraphOutputs:
    logits: Node
    mu: Node
    var: Node
    params: Dict[str, Node]
    attention: List[Node]


def _finite(node: Node, layer: str) -> Node:
    if not np.all(np.isfinite(node.value)):
        raise InferenceError(layer)
    return node


def _check_inputs(config: ModelConfig, obs: np.ndarray, actions: np.ndarray) -> None:
    if obs.ndim != 2 or obs.shape[1] != config.obs_dim:
        raise DomainError(f"obs must have shape (B, {config.obs_dim}), got {obs.shape}")
    if actions.ndim != 3 or actions.shape[2] != ACTION_DIM or actions.shape[0] != obs.shape[0]:
        raise DomainError(f"actions must have shape ({obs.shape[0]}, H, {ACTION_DIM}), got {actions.shape}")
    if actions.shape[1] < 1:
        raise DomainError("At least one action row is required")


def build_graph(tape: GradTape, weights: ModelWeights, obs: np.ndarray, actions: np.ndarray) -> GraphOutputs:
    """
    Run the model on a batch, recording on tape.

    Args:
        tape: Recording or inference tape
        weights: Model weights (wrapped as named leaves)
        obs: Observations, shape (B, F)
        actions: Action rows, shape (B, H, 3)

    Returns:
        GraphOutputs with logits (B, H, 9), mu (B, H), var (B, H)

    Raises:
        InferenceError: On a non-finite activation, naming the layer
    """
    cfg = weights.config
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    _check_inputs(cfg, obs, actions)
    bsz, horizon, _ = actions.shape
    width = cfg.width

    p = {name: tape.leaf(t, name=name) for name, t in weights.tensors.items()}

    hidden = tape.tanh(tape.affine(tape.constant(obs), p["obs.w1"], p["obs.b1"]))
    obs_token = _finite(tape.tanh(tape.affine(hidden, p["obs.w2"], p["obs.b2"])), "obs_encoder")
    act_tokens = _finite(tape.affine(tape.constant(actions), p["act.w"], p["act.b"]), "action_embedding")
    x = tape.concat([tape.reshape(obs_token, (bsz, 1, width)), act_tokens], axis=1)
    x = tape.add(x, tape.constant(positional_encoding(horizon + 1, width)))

    attention: List[Node] = []
    for layer in range(cfg.layers):
        pre = f"block{layer}."
        if cfg.architecture == "transformer":
            a = tape.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            att = tape.causal_attention(tape.matmul(a, p[pre + "wq"]), tape.matmul(a, p[pre + "wk"]),
                                        tape.matmul(a, p[pre + "wv"]), cfg.heads)
            attention.append(att)
            x = _finite(tape.add(x, tape.affine(att, p[pre + "wo"], p[pre + "bo"])), pre + "attention")
            f = tape.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = tape.affine(tape.tanh(tape.affine(f, p[pre + "ff.w1"], p[pre + "ff.b1"])), p[pre + "ff.w2"], p[pre + "ff.b2"])
            x = _finite(tape.add(x, f), pre + "ffn")
        else:
            h = tape.constant(np.zeros((bsz, width)))
            c = tape.constant(np.zeros((bsz, width)))
            outputs = []
            for t in range(horizon + 1):
                hc = tape.lstm_cell(tape.getitem(x, (slice(None), t)), h, c, p[pre + "wx"], p[pre + "wh"], p[pre + "b"])
                h = tape.getitem(hc, (slice(None), slice(0, width)))
                c = tape.getitem(hc, (slice(None), slice(width, 2 * width)))
                outputs.append(h)
            x = _finite(tape.stack(outputs, axis=1), pre + "lstm")

    x = _finite(tape.layer_norm(x, p["final.ln.g"], p["final.ln.b"]), "final_norm")
    features = tape.getitem(x, (slice(None), slice(1, None)))
    logits = _finite(tape.affine(features, p["head.event.w"], p["head.event.b"]), "event_head")
    bearing = _finite(tape.affine(features, p["head.bearing.w"], p["head.bearing.b"]), "bearing_head")
    mu = tape.getitem(bearing, (slice(None), slice(None), 0))
    var = _finite(tape.variance(tape.getitem(bearing, (slice(None), slice(None), 1)), cfg.var_min), "bearing_head")
    return GraphOutputs(logits=logits, mu=mu, var=var, params=p, attention=attention)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(weights: ModelWeights, obs: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inference over a batch: (event_probs (B,H,9), bearing_mu (B,H), bearing_var (B,H))."""
    out = build_graph(GradTape(record=False), weights, obs, actions)
    return softmax(out.logits.value), out.mu.value, out.var.value


def forward(weights: ModelWeights, obs: Sequence[float], actions: np.ndarray) -> List[StepPrediction]:
    """Predictions for one observation and H action rows."""
    probs, mu, var = predict_batch(weights, np.asarray(obs, dtype=np.float64)[None, :],
                                   np.asarray(actions, dtype=np.float64)[None, :, :])
    return [StepPrediction(probs[0, t], float(mu[0, t]), float(var[0, t])) for t in range(probs.shape[1])]


def attention_maps(weights: ModelWeights, obs: np.ndarray, actions: np.ndarray) -> List[np.ndarray]:
    """Post-softmax attention weights (B, heads, T, T) per transformer block."""
    out = build_graph(GradTape(record=False), weights, obs, actions)
    return [node.cache["attention"] for node in out.attention]


def loss(predictions: Sequence[StepPrediction], event_labels: Sequence[int], bearing_labels: Sequence[float]) -> float:
    """Mean over steps of cross-entropy plus Gaussian NLL, in nats."""
    if not (len(predictions) == len(event_labels) == len(bearing_labels)) or not predictions:
        raise DomainError("predictions and labels must be non-empty and aligned")
    total = 0.0
    for pred, label, y in zip(predictions, event_labels, bearing_labels):
        ce = -math.log(pred.event_probs[int(label)])
        nll = HALF_LOG_2PI + 0.5 * math.log(pred.bearing_var) + (y - pred.bearing_mu) ** 2 / (2.0 * pred.bearing_var)
        total += ce + nll
    return total / len(predictions)


def model_loss(tape: GradTape, weights: ModelWeights, obs: np.ndarray, actions: np.ndarray,
               event_labels: np.ndarray, bearing_labels: np.ndarray) -> Tuple[Node, Node, Node, Dict[str, Node]]:
    """Record the training loss: (total, cross-entropy, NLL, parameter leaves)."""
    out = build_graph(tape, weights, obs, actions)
    ce = tape.cross_entropy(out.logits, event_labels)
    nll = tape.gaussian_nll(out.mu, out.var, bearing_labels)
    return tape.add(ce, nll), ce, nll, out.params
