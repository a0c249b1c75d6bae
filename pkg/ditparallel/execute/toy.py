"""
Toy Diffusion Transformer
-------------------------

A small, deterministic attention network standing in for the noise predictor eps_theta:

    h = x + c                       c: constant condition bias
    per layer:
        h = h + Attn(h) W_o         multi-head softmax attention, full sequence as context
        h = h + tanh(h W_in) W_out
    eps = h

and an explicit Euler sampler x_{t-1} = x_t - eta * eps.

Every row (token) goes through exactly the same vector-matrix products whatever the number of
rows computed together, so a patch computed alone is bitwise equal to the same rows computed
as part of the whole sequence. This is what lets the parallel executors reproduce the serial
loop exactly when no stale data is involved.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..exceptions import NumericError, StalenessError, ValidationError

__all__ = ['ToyLayer', 'ToyDiT', 'LatentState', 'KVCache', 'ReferenceRun', 'AutoWarmup',
           'build_toy_model', 'make_latent', 'project', 'attention', 'layer_kv', 'layer_apply',
           'check_finite', 'forward', 'serial_reference', 'divergence', 'relative_change', 'auto_warmup']

logger = logging.getLogger(__name__)


def _frozen(array):
    # type: (np.ndarray) -> np.ndarray
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ToyLayer:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_mlp_in: np.ndarray
    w_mlp_out: np.ndarray

    def matrices(self):
        # type: () -> Tuple[np.ndarray, ...]
        return self.w_q, self.w_k, self.w_v, self.w_o, self.w_mlp_in, self.w_mlp_out


@dataclass(frozen=True, eq=False)
class ToyDiT:
    layers: Tuple[ToyLayer, ...]
    condition_bias: np.ndarray
    seed: int
    heads: int
    mlp_ratio: float = 4

    @property
    def hidden_size(self):
        # type: () -> int
        return self.condition_bias.shape[0]

    @property
    def depth(self):
        # type: () -> int
        return len(self.layers)


@dataclass(frozen=True, eq=False)
class LatentState:
    """
    x_t of the sampler. `timestep` counts the steps still to run: S for the initial noise, 0 at the end.
    """
    x: np.ndarray
    timestep: int

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ValidationError('latent shall be a p x hs matrix, got shape %r' % (self.x.shape,))
        if not np.isfinite(self.x).all():
            raise NumericError('latent at timestep %d has non-finite entries' % self.timestep)

    @property
    def shape(self):
        # type: () -> Tuple[int, int]
        return self.x.shape


def build_toy_model(seed, layers, hidden_size, heads, mlp_ratio=4):
    # type: (int, int, int, int, float) -> ToyDiT
    """
    Weights come from numpy's PCG64 generator seeded with `seed`, filled layer by layer in the order
    W_q, W_k, W_v, W_o, W_mlp_in, W_mlp_out, then the condition bias. Each matrix is divided by the
    square root of its fan-in.
    """
    for name, value in (('layers', layers), ('hidden_size', hidden_size), ('heads', heads)):
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ValidationError('%s shall be a positive integer, got %r' % (name, value))
    if hidden_size % heads:
        raise ValidationError('hidden_size %d is not divisible by heads %d' % (hidden_size, heads))
    mlp_hidden = int(round(mlp_ratio * hidden_size))
    if mlp_hidden < 1:
        raise ValidationError('mlp_ratio %r gives an empty MLP' % (mlp_ratio,))
    rng = np.random.default_rng(seed)

    def fill(rows, cols):
        return _frozen(rng.standard_normal((rows, cols)) / np.sqrt(rows))

    built = []
    for _ in range(layers):
        built.append(ToyLayer(
            w_q=fill(hidden_size, hidden_size),
            w_k=fill(hidden_size, hidden_size),
            w_v=fill(hidden_size, hidden_size),
            w_o=fill(hidden_size, hidden_size),
            w_mlp_in=fill(hidden_size, mlp_hidden),
            w_mlp_out=fill(mlp_hidden, hidden_size),
        ))
    bias = _frozen(rng.standard_normal(hidden_size) / np.sqrt(hidden_size))
    return ToyDiT(tuple(built), bias, seed, heads, mlp_ratio)


def make_latent(seed, seq_len, hidden_size, timestep):
    # type: (int, int, int, int) -> LatentState
    """
    Initial Gaussian noise, drawn from its own generator so it does not depend on the model.
    """
    rng = np.random.default_rng([seed, 1])
    return LatentState(rng.standard_normal((seq_len, hidden_size)), timestep)


# ---[ Row-wise kernels ]----

def project(h, w):
    # type: (np.ndarray, np.ndarray) -> np.ndarray
    """
    h @ w one row at a time (a stack of 1 x k products), independent of how many rows are passed.
    """
    return np.matmul(np.ascontiguousarray(h)[:, None, :], w)[:, 0, :]


def attention(q, k, v, heads):
    # type: (np.ndarray, np.ndarray, np.ndarray, int) -> np.ndarray
    """
    Softmax attention of query rows `q` over the full key/value sequence.
    """
    rows, hs = q.shape
    tokens = k.shape[0]
    head_dim = hs // heads
    qh = np.ascontiguousarray(q).reshape(rows, heads, 1, head_dim)
    kh = np.ascontiguousarray(k.reshape(tokens, heads, head_dim).transpose(1, 2, 0))
    vh = np.ascontiguousarray(v.reshape(tokens, heads, head_dim).transpose(1, 0, 2))
    scores = np.matmul(qh, kh) / np.sqrt(head_dim)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(np.matmul(weights, vh)).reshape(rows, hs)


def layer_kv(layer, h):
    # type: (ToyLayer, np.ndarray) -> Tuple[np.ndarray, np.ndarray]
    return project(h, layer.w_k), project(h, layer.w_v)


def layer_apply(layer, h, k, v, heads):
    # type: (ToyLayer, np.ndarray, np.ndarray, np.ndarray, int) -> np.ndarray
    h = h + project(attention(project(h, layer.w_q), k, v, heads), layer.w_o)
    return h + project(np.tanh(project(h, layer.w_mlp_in)), layer.w_mlp_out)


def check_finite(h, layer, timestep):
    # type: (np.ndarray, int, int) -> None
    if not np.isfinite(h).all():
        raise NumericError('non-finite activation after layer %d at timestep %d' % (layer, timestep))


def forward(toy, x, timestep):
    # type: (ToyDiT, np.ndarray, int) -> np.ndarray
    """
    eps for the whole sequence, every layer attending to fresh K/V.
    """
    h = x + toy.condition_bias
    for index, layer in enumerate(toy.layers):
        k, v = layer_kv(layer, h)
        h = layer_apply(layer, h, k, v, toy.heads)
        check_finite(h, index, timestep)
    return h


# ---[ KV buffers ]----

class KVCache(object):
    """
    Full spatial K and V for a block of layers, tagged per patch with the timestep that produced them.
    Zero-initialised buffers carry `initial_timestep` (one step before the first computed one).
    """

    def __init__(self, layer_ids, seq_len, hidden_size, bounds, initial_timestep):
        # type: (Sequence[int], int, int, Sequence[Tuple[int, int]], int) -> None
        self.bounds = list(bounds)
        self.k = {l: np.zeros((seq_len, hidden_size)) for l in layer_ids}
        self.v = {l: np.zeros((seq_len, hidden_size)) for l in layer_ids}
        self.source = {l: [initial_timestep] * len(self.bounds) for l in layer_ids}

    def write(self, layer, patch, k, v, timestep):
        # type: (int, int, np.ndarray, np.ndarray, int) -> None
        start, stop = self.bounds[patch]
        self.k[layer][start:stop] = k
        self.v[layer][start:stop] = v
        self.source[layer][patch] = timestep

    def write_all(self, layer, k, v, timestep):
        # type: (int, np.ndarray, np.ndarray, int) -> None
        self.k[layer][:] = k
        self.v[layer][:] = v
        self.source[layer] = [timestep] * len(self.bounds)

    def read(self, layer, timestep):
        # type: (int, int) -> Tuple[np.ndarray, np.ndarray]
        """
        K and V for attention at `timestep`; every patch shall be from `timestep` or the step before.
        """
        for patch, source in enumerate(self.source[layer]):
            if source not in (timestep, timestep + 1):
                raise StalenessError('layer %d patch %d holds timestep %d data, read at timestep %d'
                                     % (layer, patch, source, timestep))
        return self.k[layer], self.v[layer]

    def ages(self, layer, timestep):
        # type: (int, int) -> List[int]
        return [source - timestep for source in self.source[layer]]

    def fresh_count(self, layer, timestep):
        # type: (int, int) -> int
        return sum(1 for source in self.source[layer] if source == timestep)


# ---[ Serial loop and diagnostics ]----

@dataclass(frozen=True, eq=False)
class ReferenceRun:
    final: LatentState
    trajectory: Tuple[LatentState, ...] = field(default=())


def serial_reference(toy, x_init, steps, step_size, keep_trajectory=True):
    # type: (ToyDiT, LatentState, int, float, bool) -> ReferenceRun
    """
    The single-device sampler: for t = S-1 .. 0, eps = toy(x_t); x_{t-1} = x_t - eta * eps.
    """
    if steps < 1:
        raise ValidationError('steps shall be positive, got %r' % (steps,))
    x = x_init.x
    trajectory = [x_init] if keep_trajectory else []
    for t in range(steps - 1, -1, -1):
        eps = forward(toy, x, t)
        x = x - step_size * eps
        if keep_trajectory:
            trajectory.append(LatentState(x, t))
    return ReferenceRun(LatentState(x, 0), tuple(trajectory))


def divergence(a, b):
    # type: (LatentState, LatentState) -> float
    """
    Relative L2 distance ||a - b||_F / ||b||_F.
    """
    if a.shape != b.shape:
        raise ValidationError('shape mismatch: %r vs %r' % (a.shape, b.shape))
    denominator = np.linalg.norm(b.x)
    if denominator == 0:
        raise NumericError('divergence against an all-zero latent is undefined')
    return float(np.linalg.norm(a.x - b.x) / denominator)


def relative_change(new, old):
    # type: (np.ndarray, np.ndarray) -> float
    norm = np.linalg.norm(old)
    if norm == 0:
        return float('inf')
    return float(np.linalg.norm(new - old) / norm)


@dataclass(frozen=True)
class AutoWarmup:
    warmup_steps: int
    reached: bool
    changes: Tuple[float, ...]


def auto_warmup(toy, x_init, steps, threshold, step_size):
    # type: (ToyDiT, LatentState, int, float, float) -> AutoWarmup
    """
    Run synchronous steps until the latent moves by less than `threshold` (relative) between
    consecutive steps; that step count is the warmup. `reached` is False when it never happens.
    """
    if not threshold >= 0:
        raise ValidationError('threshold shall be positive, got %r' % (threshold,))
    if steps < 1:
        raise ValidationError('steps shall be positive, got %r' % (steps,))
    x = x_init.x
    changes = []  # type: List[float]
    for index, t in enumerate(range(steps - 1, -1, -1)):
        new = x - step_size * forward(toy, x, t)
        changes.append(relative_change(new, x))
        x = new
        if changes[-1] < threshold:
            logger.debug('latent change %.3g below %.3g after %d steps', changes[-1], threshold, index + 1)
            return AutoWarmup(index + 1, True, tuple(changes))
    logger.info('latent change never dropped below %.3g; warming up all %d steps', threshold, steps)
    return AutoWarmup(steps, False, tuple(changes))
