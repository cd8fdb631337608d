"""A small dense-network engine in NumPy.

Supports the nine hidden activations of the GAN search space, optional
layer normalisation on hidden layers, seven optimisers, and the
derivatives a gradient-penalised critic needs:

* ``backward``: parameter (and input) gradients of a scalar loss,
* ``input_gradient``: per-row gradient of a scalar network w.r.t. its input,
* ``jvp_param_gradient``: parameter gradient of the directional derivative
  ``J(x) . v`` with ``v`` held fixed. This is the Hessian-vector product that
  turns the gradient penalty into a trainable loss without a general
  autodiff graph.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import functools
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = (
    "elu", "relu", "selu", "sigmoid", "softmax", "tanh", "hard_sigmoid", "softplus", "leaky_relu",
)
OUTPUT_ACTIVATIONS = ACTIVATIONS + ("linear",)
OPTIMIZERS = ("adadelta", "adagrad", "adam", "adamax", "nadam", "rmsprop", "sgd")

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
LN_EPS = 1e-5


@functools.lru_cache(maxsize=None)
def keep_heap_allocations() -> bool:
    """Stop glibc from serving mid-sized arrays with fresh mmap calls.

    Training allocates many short-lived temporaries of 100 KB to a few MB;
    with the default thresholds each one costs an mmap/munmap pair and page
    faults, which roughly doubles step time at large batch sizes. Returns
    whether the tuning was applied (False off glibc).
    """
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(mallopt(m_mmap_threshold, 64 << 20)) and bool(mallopt(m_trim_threshold, 128 << 20))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "elu":
        return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    if name == "selu":
        return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    if name == "sigmoid":
        return _sigmoid(x)
    if name == "tanh":
        return np.tanh(x)
    if name == "hard_sigmoid":
        return np.clip(0.2 * x + 0.5, 0.0, 1.0)
    if name == "softplus":
        return np.logaddexp(0.0, x)
    if name == "softmax":
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown activation {name!r}")


def _derivatives(
    name: str, x: np.ndarray, y: np.ndarray, second: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """First and second elementwise derivatives (softmax is handled apart).

    The second derivative is None where it vanishes identically (piecewise
    linear activations) or when ``second`` is False.
    """
    if name == "linear":
        return np.ones_like(x), None
    if name == "relu":
        return (x > 0).astype(float), None
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, LEAKY_SLOPE), None
    if name == "hard_sigmoid":
        return np.where((x > -2.5) & (x < 2.5), 0.2, 0.0), None
    if name == "elu":
        e = ELU_ALPHA * np.exp(np.minimum(x, 0.0))
        return np.where(x > 0, 1.0, e), (np.where(x > 0, 0.0, e) if second else None)
    if name == "selu":
        e = SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(x, 0.0))
        return np.where(x > 0, SELU_SCALE, e), (np.where(x > 0, 0.0, e) if second else None)
    if name == "sigmoid":
        d1 = y * (1.0 - y)
        return d1, (d1 * (1.0 - 2.0 * y) if second else None)
    if name == "tanh":
        d1 = 1.0 - y * y
        return d1, (-2.0 * y * d1 if second else None)
    if name == "softplus":
        s = _sigmoid(x)
        return s, (s * (1.0 - s) if second else None)
    raise ValueError(f"unknown activation {name!r}")


def _act_vjp(name: str, x: np.ndarray, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "softmax":
        return y * (g - np.sum(g * y, axis=1, keepdims=True))
    if name == "linear":
        return g
    return _derivatives(name, x, y, second=False)[0] * g


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network.

    ``layer_widths`` lists input width first and output width last. The
    hidden activation applies to every layer but the last, which uses
    ``output_activation``. Layer norm, when on, acts on hidden
    pre-activations only.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "linear"
    layer_norm: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        hidden = len(widths) - 2
        # per-layer lookups happen every pass, so resolve them once
        object.__setattr__(self, "_acts", (self.activation,) * hidden + (self.output_activation,))
        object.__setattr__(self, "_norms", (self.layer_norm,) * hidden + (False,))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def layer_activation(self, layer: int) -> str:
        return self._acts[layer]

    def normalised(self, layer: int) -> bool:
        return self._norms[layer]


@dataclass
class MlpState:
    """Trainable parameters; ``gains``/``shifts`` hold one vector per hidden
    layer when layer norm is on and are empty otherwise."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gains: list[np.ndarray] = field(default_factory=list)
    shifts: list[np.ndarray] = field(default_factory=list)
    flat: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        # every parameter becomes a view into one buffer, in arrays() order,
        # so accumulation and optimizer updates are single vector operations
        arrays = [np.asarray(a, dtype=float) for a in self.arrays()]
        self.flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        self._bind()

    def _bind(self) -> None:
        offset = 0
        views = []
        for a in self.arrays():
            views.append(self.flat[offset:offset + a.size].reshape(a.shape))
            offset += a.size
        nw, nb, ng = len(self.weights), len(self.biases), len(self.gains)
        self.weights = views[:nw]
        self.biases = views[nw:nw + nb]
        self.gains = views[nw + nb:nw + nb + ng]
        self.shifts = views[nw + nb + ng:]

    def packed(self) -> np.ndarray | None:
        """The flat buffer, or None if an entry was rebound to a foreign array."""
        flat = self.flat
        for a in self.arrays():
            if a.base is not flat:
                return None
        return flat

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, *self.gains, *self.shifts]

    def _like(self, flat: np.ndarray) -> "MlpState":
        out = object.__new__(MlpState)
        out.weights, out.biases = list(self.weights), list(self.biases)
        out.gains, out.shifts = list(self.gains), list(self.shifts)
        out.flat = flat
        out._bind()
        return out

    def copy(self) -> "MlpState":
        flat = self.packed()
        if flat is None:
            return MlpState(*(list(a.copy() for a in part) for part in
                              (self.weights, self.biases, self.gains, self.shifts)))
        return self._like(flat.copy())

    def zeros_like(self) -> "MlpState":
        return self._like(np.zeros(sum(a.size for a in self.arrays())))

    def add_(self, other: "MlpState", scale: float = 1.0) -> "MlpState":
        mine, theirs = self.packed(), other.packed()
        if mine is not None and theirs is not None and mine.size == theirs.size:
            mine += theirs if scale == 1.0 else scale * theirs
            return self
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b
        return self

    def is_finite(self) -> bool:
        flat = self.packed()
        if flat is not None:
            return bool(np.isfinite(flat).all())
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(spec: MlpSpec) -> MlpState:
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    hidden = spec.layer_widths[1:-1] if spec.layer_norm else ()
    return MlpState(
        weights, biases, [np.ones(w) for w in hidden], [np.zeros(w) for w in hidden]
    )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    z: list[np.ndarray | None] = field(default_factory=list)
    sigma: list[np.ndarray | None] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def _check_batch(spec: MlpSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != spec.layer_widths[0]:
        raise ValueError(f"expected batch of width {spec.layer_widths[0]}, got shape {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("non-finite network input")
    return batch


def forward(
    state: MlpState, spec: MlpSpec, batch: np.ndarray, check: bool = True
) -> tuple[np.ndarray, ForwardCache]:
    """``check=False`` skips input validation for callers that own the batch."""
    h = _check_batch(spec, batch) if check else batch
    cache = ForwardCache()
    for layer in range(spec.n_layers):
        cache.inputs.append(h)
        a = h @ state.weights[layer] + state.biases[layer]
        if spec.normalised(layer):
            z, sigma = _ln_stats(a)
            n = state.gains[layer] * z + state.shifts[layer]
        else:
            z = sigma = None
            n = a
        h = activate(spec.layer_activation(layer), n)
        cache.z.append(z)
        cache.sigma.append(sigma)
        cache.pre.append(n)
        cache.outputs.append(h)
    return h, cache


def _grad_holder(state: MlpState, out: MlpState | None) -> MlpState:
    if out is None:
        return state.zeros_like()
    if out.packed() is None or out.flat.size != state.flat.size:
        raise ValueError("gradient buffer does not match the parameters")
    return out


def _rowmean(x: np.ndarray) -> np.ndarray:
    # np.mean's wrapper costs more than the arithmetic at these sizes
    return np.add.reduce(x, axis=1, keepdims=True) / x.shape[1]


def _ln_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centred = a - _rowmean(a)
    sigma = np.sqrt(_rowmean(centred * centred) + LN_EPS)
    return centred / sigma, sigma


def _ln_backward(z: np.ndarray, sigma: np.ndarray, zbar: np.ndarray) -> np.ndarray:
    return (zbar - _rowmean(zbar) - z * _rowmean(zbar * z)) / sigma


def backward(
    state: MlpState,
    spec: MlpSpec,
    cache: ForwardCache,
    output_gradient: np.ndarray,
    params: bool = True,
    out: MlpState | None = None,
    inputs: bool = True,
) -> tuple[MlpState | None, np.ndarray | None]:
    """Reverse-mode pass; returns (parameter gradients, input gradient).

    With ``params=False`` only the input gradient is formed and the first
    element is None; with ``inputs=False`` the input gradient is skipped and
    the second element is None. ``out`` (from ``state.zeros_like()``)
    receives the parameter gradients in place, saving an allocation per call.
    """
    g = np.asarray(output_gradient, dtype=float)
    if g.shape != cache.outputs[-1].shape:
        raise ValueError(f"output gradient shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads = _grad_holder(state, out) if params else None
    for layer in reversed(range(spec.n_layers)):
        nbar = _act_vjp(spec.layer_activation(layer), cache.pre[layer], cache.outputs[layer], g)
        if spec.normalised(layer):
            z = cache.z[layer]
            if params:
                np.add.reduce(nbar * z, axis=0, out=grads.gains[layer])
                np.add.reduce(nbar, axis=0, out=grads.shifts[layer])
            abar = _ln_backward(z, cache.sigma[layer], state.gains[layer] * nbar)
        else:
            abar = nbar
        if params:
            np.matmul(cache.inputs[layer].T, abar, out=grads.weights[layer])
            np.add.reduce(abar, axis=0, out=grads.biases[layer])
        g = abar @ state.weights[layer].T if (layer or inputs) else None
    return grads, g


def input_gradient(state: MlpState, spec: MlpSpec, batch: np.ndarray) -> np.ndarray:
    """Row ``i`` holds d output_i / d input_i for a single-output network."""
    if spec.layer_widths[-1] != 1:
        raise ValueError("input_gradient needs a network with output width 1")
    out, cache = forward(state, spec, batch)
    return backward(state, spec, cache, np.ones_like(out))[1]


def jvp_param_gradient(
    state: MlpState,
    spec: MlpSpec,
    batch: np.ndarray,
    direction: np.ndarray,
    weights: np.ndarray | None = None,
    output_adjoint: np.ndarray | None = None,
    cache: ForwardCache | None = None,
    check: bool = True,
    out: MlpState | None = None,
) -> tuple[np.ndarray, MlpState]:
    """Directional derivatives and their parameter gradient.

    Computes ``t_i = J(x_i) v_i`` (the forward-mode tangent of the output
    along ``direction`` row ``v_i``) and the gradient with respect to every
    parameter of ``sum_i weights_i . t_i + sum_i output_adjoint_i . f(x_i)``,
    treating ``direction`` as a constant. ``weights`` defaults to ones and
    ``output_adjoint`` to zeros; passing a nonzero ``output_adjoint`` folds an
    ordinary loss on the outputs into the same pass. ``cache`` may carry the
    primal quantities of an earlier ``forward`` on the same batch; ``out``
    is an optional gradient buffer as in :func:`backward`.
    """
    h = _check_batch(spec, batch) if check else batch
    u = np.asarray(direction, dtype=float)
    if u.shape != h.shape:
        raise ValueError(f"direction shape {u.shape} != batch shape {h.shape}")
    # forward pass carrying primal (h) and tangent (u) side by side
    rec = []
    for layer in range(spec.n_layers):
        W = state.weights[layer]
        if cache is not None:
            h, z, sigma, n, y = (cache.inputs[layer], cache.z[layer], cache.sigma[layer],
                                 cache.pre[layer], cache.outputs[layer])
        adot = u @ W
        if cache is None:
            a = h @ W + state.biases[layer]
            if spec.normalised(layer):
                z, sigma = _ln_stats(a)
                n = state.gains[layer] * z + state.shifts[layer]
            else:
                z = sigma = None
                n = a
        if spec.normalised(layer):
            m = _rowmean(z * adot)
            zdot = (adot - _rowmean(adot) - z * m) / sigma
            ndot = state.gains[layer] * zdot
        else:
            zdot = m = None
            ndot = adot
        name = spec.layer_activation(layer)
        if cache is None:
            y = activate(name, n)
        if name == "softmax":
            d1 = d2 = None
            udot = y * (ndot - np.sum(y * ndot, axis=1, keepdims=True))
        else:
            d1, d2 = _derivatives(name, n, y)
            udot = d1 * ndot
        rec.append((h, u, adot, z, sigma, zdot, m, d1, d2, ndot, y))
        h, u = y, udot
    tangent = u
    ubar = np.ones_like(u) if weights is None else np.asarray(weights, dtype=float).reshape(u.shape)
    hbar = np.zeros_like(u) if output_adjoint is None else np.asarray(output_adjoint, dtype=float).reshape(u.shape)
    grads = _grad_holder(state, out)
    for layer in reversed(range(spec.n_layers)):
        h_in, u_in, adot, z, sigma, zdot, m, d1, d2, ndot, y = rec[layer]
        name = spec.layer_activation(layer)
        if name == "softmax":
            s_yu = np.sum(y * ubar, axis=1, keepdims=True)
            s_yn = np.sum(y * ndot, axis=1, keepdims=True)
            ndot_bar = y * (ubar - s_yu)
            ybar = ubar * ndot - ubar * s_yn - ndot * s_yu + hbar
            nbar = y * (ybar - np.sum(y * ybar, axis=1, keepdims=True))
        else:
            ndot_bar = d1 * ubar
            nbar = d1 * hbar
            if d2 is not None:
                nbar = nbar + d2 * ndot * ubar
        if spec.normalised(layer):
            gain = state.gains[layer]
            np.add.reduce(ndot_bar * zdot + nbar * z, axis=0, out=grads.gains[layer])
            np.add.reduce(nbar, axis=0, out=grads.shifts[layer])
            zdot_bar = gain * ndot_bar
            zbar = gain * nbar
            c = _rowmean(zdot_bar * z)
            adot_bar = (zdot_bar - _rowmean(zdot_bar) - z * c) / sigma
            zbar = zbar - (zdot_bar * m + adot * c) / sigma
            sigma_bar = -np.sum(zdot_bar * zdot, axis=1, keepdims=True) / sigma
            abar = _ln_backward(z, sigma, zbar) + sigma_bar * z / z.shape[1]
        else:
            adot_bar, abar = ndot_bar, nbar
        W = state.weights[layer]
        gw = grads.weights[layer]
        np.matmul(h_in.T, abar, out=gw)
        gw += u_in.T @ adot_bar
        np.add.reduce(abar, axis=0, out=grads.biases[layer])
        hbar = abar @ W.T
        ubar = adot_bar @ W.T
    return tangent, grads


_CONSTANTS = {
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "adamax": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "nadam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "rmsprop": {"rho": 0.9, "eps": 1e-8},
    "adadelta": {"rho": 0.95, "eps": 1e-6},
    "adagrad": {"eps": 1e-10},
    "sgd": {},
}


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    step_counter: int = 0

    def __post_init__(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


_SLOT_NAMES = {
    "adam": ("m", "v"),
    "nadam": ("m", "v"),
    "adamax": ("m", "u"),
    "rmsprop": ("v",),
    "adagrad": ("G",),
    "adadelta": ("Eg", "Edx"),
    "sgd": (),
}


def make_optimizer(kind: str, learning_rate: float, state: MlpState) -> OptimizerState:
    opt = OptimizerState(kind, learning_rate)
    size = sum(a.size for a in state.arrays())
    opt.slots = {name: np.zeros(size) for name in _SLOT_NAMES[kind]}
    return opt


def optimizer_step(opt: OptimizerState, state: MlpState, gradients: MlpState) -> MlpState:
    """Apply one update in place and return ``state``.

    Slots are flat vectors over all parameters so each rule is a handful of
    whole-vector operations regardless of depth.
    """
    params, grads = state.arrays(), gradients.arrays()
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("gradient structure does not match the parameters")
    g = gradients.packed()
    if g is None:
        g = np.concatenate([x.ravel() for x in grads])
    opt.step_counter += 1
    t = opt.step_counter
    lr = opt.learning_rate
    c = _CONSTANTS[opt.kind]
    if opt.kind == "sgd":
        step = -lr * g
    elif opt.kind in ("adam", "nadam"):
        m, v = opt.slots["m"], opt.slots["v"]
        m *= c["beta1"]
        m += (1 - c["beta1"]) * g
        v *= c["beta2"]
        v += (1 - c["beta2"]) * g * g
        m_hat = m / (1 - c["beta1"] ** t)
        v_hat = v / (1 - c["beta2"] ** t)
        if opt.kind == "nadam":
            m_hat = c["beta1"] * m_hat + (1 - c["beta1"]) * g / (1 - c["beta1"] ** t)
        step = -lr * m_hat / (np.sqrt(v_hat) + c["eps"])
    elif opt.kind == "adamax":
        m, u = opt.slots["m"], opt.slots["u"]
        m *= c["beta1"]
        m += (1 - c["beta1"]) * g
        np.maximum(c["beta2"] * u, np.abs(g), out=u)
        step = -lr / (1 - c["beta1"] ** t) * m / (u + c["eps"])
    elif opt.kind == "rmsprop":
        v = opt.slots["v"]
        v *= c["rho"]
        v += (1 - c["rho"]) * g * g
        step = -lr * g / (np.sqrt(v) + c["eps"])
    elif opt.kind == "adagrad":
        G = opt.slots["G"]
        G += g * g
        step = -lr * g / (np.sqrt(G) + c["eps"])
    elif opt.kind == "adadelta":
        Eg, Edx = opt.slots["Eg"], opt.slots["Edx"]
        Eg *= c["rho"]
        Eg += (1 - c["rho"]) * g * g
        dx = -np.sqrt(Edx + c["eps"]) / np.sqrt(Eg + c["eps"]) * g
        Edx *= c["rho"]
        Edx += (1 - c["rho"]) * dx * dx
        step = lr * dx
    else:
        raise ValueError(f"unknown optimizer {opt.kind!r}")
    flat = state.packed()
    if flat is not None:
        flat += step
        return state
    offset = 0
    for p in params:
        p += step[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return state


def state_to_dict(state: MlpState) -> dict:
    return {
        "weights": [w.tolist() for w in state.weights],
        "biases": [b.tolist() for b in state.biases],
        "gains": [g.tolist() for g in state.gains],
        "shifts": [s.tolist() for s in state.shifts],
    }


def state_from_dict(d: dict) -> MlpState:
    return MlpState(
        [np.array(w, dtype=float) for w in d["weights"]],
        [np.array(b, dtype=float) for b in d["biases"]],
        [np.array(g, dtype=float) for g in d["gains"]],
        [np.array(s, dtype=float) for s in d["shifts"]],
    )
