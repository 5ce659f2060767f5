"""Minimal dense-network engine with exact manual backpropagation.

Layers are Dense -> ReLU -> BatchNorm; the final projection layer is a
plain dense layer (no activation, no normalization) so the embedding can
take values in every quadrant.  Everything is float64 numpy and fully
deterministic for a fixed seed.
"""

from dataclasses import dataclass, field

import numpy as np

# Default architecture: five feature-extraction layers of width 500,
# then the 2000 -> 500 -> 100 reduction whose outputs can be tapped.
DEFAULT_HIDDEN_DIMS = (500, 500, 500, 500, 500, 2000, 500, 100)
DEFAULT_TAPS = {"dense2000": 5, "dense500": 6, "dense100": 7}

# Tap index that refers to the raw network input rather than a layer.
INPUT_TAP = -1


def as_matrix(x, name="matrix"):
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of the network: input width, hidden widths, named taps."""

    input_dim: int
    hidden_dims: tuple = DEFAULT_HIDDEN_DIMS
    taps: dict = field(default_factory=lambda: dict(DEFAULT_TAPS))
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "taps", dict(self.taps))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.output_dim < 1:
            raise ValueError(f"output_dim must be >= 1, got {self.output_dim}")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"zero-width hidden layer in {self.hidden_dims}")
        for name, idx in self.taps.items():
            if not (idx == INPUT_TAP or 0 <= idx < len(self.hidden_dims)):
                raise ValueError(f"tap {name!r} names missing layer {idx}")

    @property
    def n_layers(self):
        """Hidden layers plus the output layer."""
        return len(self.hidden_dims) + 1

    def layer_dims(self):
        """(in_dim, out_dim) per layer, output layer last."""
        widths = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    def tap_dim(self, name):
        idx = self.taps[name]
        return self.input_dim if idx == INPUT_TAP else self.hidden_dims[idx]


@dataclass
class LayerParams:
    """One dense layer; batch-norm fields are None on the output layer."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    @property
    def has_bn(self):
        return self.bn_gamma is not None

    def copy(self):
        c = lambda a: None if a is None else a.copy()
        return LayerParams(
            self.weights.copy(), self.bias.copy(), c(self.bn_gamma), c(self.bn_beta),
            c(self.bn_running_mean), c(self.bn_running_var),
            self.bn_momentum, self.bn_epsilon,
        )


@dataclass
class NetworkParams:
    spec: NetworkSpec
    layers: list

    def copy(self):
        return NetworkParams(self.spec, [l.copy() for l in self.layers])

    def named_trainable(self):
        """Ordered (name, array) pairs of every trainable parameter."""
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}.weights", layer.weights))
            out.append((f"layer{i}.bias", layer.bias))
            if layer.has_bn:
                out.append((f"layer{i}.bn_gamma", layer.bn_gamma))
                out.append((f"layer{i}.bn_beta", layer.bn_beta))
        return out


@dataclass
class LayerGrads:
    weights: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None


@dataclass
class Gradients:
    layers: list

    def named(self):
        out = []
        for i, g in enumerate(self.layers):
            out.append((f"layer{i}.weights", g.weights))
            out.append((f"layer{i}.bias", g.bias))
            if g.bn_gamma is not None:
                out.append((f"layer{i}.bn_gamma", g.bn_gamma))
                out.append((f"layer{i}.bn_beta", g.bn_beta))
        return out


@dataclass
class LayerTrace:
    """Cached intermediates of one layer for one mini-batch."""

    x: np.ndarray  # layer input
    z: np.ndarray  # pre-activation
    a: np.ndarray | None = None  # post-ReLU (hidden layers only)
    xhat: np.ndarray | None = None  # normalized activation
    mean: np.ndarray | None = None  # batch (train) or running (infer) mean
    inv_std: np.ndarray | None = None
    var: np.ndarray | None = None
    out: np.ndarray = None  # layer output


@dataclass
class ForwardTrace:
    mode: str  # "train" | "infer"
    x: np.ndarray
    layers: list
    taps: dict
    embedding: np.ndarray


def init_params(spec: NetworkSpec, seed: int) -> NetworkParams:
    """He/fan-in initialized weights, zero biases, unit batch-norm.

    Deterministic: the same (spec, seed) always yields bit-identical
    parameters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1117]))
    dims = spec.layer_dims()
    layers = []
    for li, (din, dout) in enumerate(dims):
        w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout))
        b = np.zeros(dout)
        if li < len(dims) - 1:
            layers.append(LayerParams(
                w, b,
                bn_gamma=np.ones(dout), bn_beta=np.zeros(dout),
                bn_running_mean=np.zeros(dout), bn_running_var=np.ones(dout),
            ))
        else:
            layers.append(LayerParams(w, b))
    return NetworkParams(spec, layers)


def forward(params: NetworkParams, batch, mode="train"):
    """Run the network, returning (embedding, trace).

    Train mode normalizes with batch statistics and folds them into the
    running estimates; infer mode reads the running estimates and leaves
    them untouched, so rows are embedded independently of each other.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = as_matrix(batch, "batch")
    spec = params.spec
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"batch has {x.shape[1]} columns, spec wants {spec.input_dim}")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError("train-mode batch needs at least 2 rows for batch norm")

    traces = []
    h = x
    for layer in params.layers:
        z = h @ layer.weights
        z += layer.bias
        if not layer.has_bn:  # output layer: linear
            traces.append(LayerTrace(x=h, z=z, out=z))
            h = z
            continue
        a = np.maximum(z, 0.0)
        if mode == "train":
            n = a.shape[0]
            mean = a.mean(axis=0)
            xhat = a - mean
            var = np.einsum("ij,ij->j", xhat, xhat) / n
            layer.bn_running_mean *= layer.bn_momentum
            layer.bn_running_mean += (1.0 - layer.bn_momentum) * mean
            layer.bn_running_var *= layer.bn_momentum
            layer.bn_running_var += (1.0 - layer.bn_momentum) * var
        else:
            mean = layer.bn_running_mean
            var = layer.bn_running_var
            xhat = a - mean
        inv_std = 1.0 / np.sqrt(var + layer.bn_epsilon)
        xhat *= inv_std
        out = xhat * layer.bn_gamma
        out += layer.bn_beta
        traces.append(LayerTrace(x=h, z=z, a=a, xhat=xhat, mean=mean,
                                 inv_std=inv_std, var=var, out=out))
        h = out

    embedding = h
    if not np.all(np.isfinite(embedding)):
        raise FloatingPointError("forward pass produced non-finite embedding")
    taps = {}
    for name, idx in spec.taps.items():
        taps[name] = x if idx == INPUT_TAP else traces[idx].out
    return embedding, ForwardTrace(mode=mode, x=x, layers=traces, taps=taps,
                                   embedding=embedding)


def tap_features(trace: ForwardTrace, tap: str):
    """Post-batch-norm output of a named layer for the traced batch."""
    if tap not in trace.taps:
        raise ValueError(f"unknown tap {tap!r}; have {sorted(trace.taps)}")
    return trace.taps[tap]


def backward(params: NetworkParams, trace: ForwardTrace, grad_embedding) -> Gradients:
    """Exact chain rule through dense, ReLU and batch norm.

    The batch-norm backward includes the dependence of the batch mean and
    variance on the inputs, so gradients match finite differences of the
    train-mode forward pass.
    """
    if trace.mode != "train":
        raise ValueError("backward requires a train-mode trace")
    g = np.asarray(grad_embedding, dtype=np.float64)
    if g.shape != trace.embedding.shape:
        raise ValueError(f"grad_embedding shape {g.shape} != embedding "
                         f"shape {trace.embedding.shape}")
    if len(trace.layers) != len(params.layers):
        raise ValueError("trace does not match params")

    grads = [None] * len(params.layers)
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        lt = trace.layers[li]
        if layer.has_bn:
            # out = gamma * xhat + beta
            dgamma = np.einsum("ij,ij->j", g, lt.xhat)
            dbeta = g.sum(axis=0)
            dxhat = g * layer.bn_gamma
            n = lt.a.shape[0]
            s1 = dxhat.sum(axis=0)
            s2 = np.einsum("ij,ij->j", dxhat, lt.xhat)
            # xhat = (a - mean(a)) * inv_std(a): compact full backward,
            # da = (inv_std / n) * (n * dxhat - s1 - xhat * s2)
            dz = dxhat
            dz *= n
            dz -= s1
            dz -= lt.xhat * s2
            dz *= lt.inv_std / n
            dz *= lt.z > 0.0
            grads[li] = LayerGrads(lt.x.T @ dz, dz.sum(axis=0), dgamma, dbeta)
            g = dz @ layer.weights.T
        else:
            grads[li] = LayerGrads(lt.x.T @ g, g.sum(axis=0))
            g = g @ layer.weights.T
    return Gradients(grads)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7


def init_adam(params: NetworkParams, lr=1e-3, beta1=0.9, beta2=0.999,
              epsilon=1e-7) -> AdamState:
    m = {name: np.zeros_like(a) for name, a in params.named_trainable()}
    v = {name: np.zeros_like(a) for name, a in params.named_trainable()}
    return AdamState(m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: NetworkParams, grads: Gradients, state: AdamState):
    """One bias-corrected Adam update, in place.

    A non-finite gradient rejects the whole step (no parameter or moment
    is touched) and raises, so training bugs surface immediately.
    """
    named_grads = grads.named()
    for name, g in named_grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    named_params = dict(params.named_trainable())
    for name, g in named_grads:
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p = named_params[name]
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"parameter {name} became non-finite")
    return params, state
