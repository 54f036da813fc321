"""Small differentiable models (linear / one-hidden-layer ReLU), Adam, and losses.

Parameters live in flat float64 vectors whose layout is implied by the
model spec; gradients are computed analytically (no autodiff framework)
and are verified against central finite differences in the test suite.

Supported heads:

* ``softmax`` -- probability vector over actions (the weak policy).
* ``scalar``  -- single real output (the entropy regressor).
* ``logit``   -- single real output read as a pre-sigmoid gate score.

Initialization draws weights uniformly from [-1/sqrt(fan_in),
+1/sqrt(fan_in)] using the Philox generator keyed by the spec's seed;
biases start at zero.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .core import KL_FLOOR, sigmoid, softmax

HEADS = ("softmax", "scalar", "logit")
LOSS_KINDS = ("mse_scalar", "kl_to_target", "api_m_step", "epi_joint")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dim: int      # 0 selects a plain linear model
    output_dim: int
    head: str
    init_seed: int = 0

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or self.hidden_dim < 0:
            raise ValueError("bad model dimensions")
        if self.head not in HEADS:
            raise ValueError("head must be one of %s" % (HEADS,))
        if self.head in ("scalar", "logit") and self.output_dim != 1:
            raise ValueError("%s head requires output_dim == 1" % self.head)


def layer_shapes(spec: ModelSpec) -> List[Tuple[int, ...]]:
    if spec.hidden_dim > 0:
        return [(spec.hidden_dim, spec.input_dim), (spec.hidden_dim,),
                (spec.output_dim, spec.hidden_dim), (spec.output_dim,)]
    return [(spec.output_dim, spec.input_dim), (spec.output_dim,)]


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in layer_shapes(spec))


def mac_count(spec: ModelSpec) -> int:
    """Multiply-accumulate operations for one forward evaluation."""
    return sum(int(np.prod(s)) for s in layer_shapes(spec) if len(s) == 2)


def _unpack(shapes, params):
    out, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(params[off:off + n].reshape(s))
        off += n
    return out


def unpack(spec: ModelSpec, params: np.ndarray):
    return _unpack(layer_shapes(spec), params)


def _init_from(shapes, rng):
    chunks = []
    for s in shapes:
        if len(s) == 2:
            bound = 1.0 / np.sqrt(s[1])
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(s))))
        else:
            chunks.append(np.zeros(int(np.prod(s))))
    return np.concatenate(chunks)


def init_params(spec: ModelSpec) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=[int(spec.init_seed), 0]))
    return _init_from(layer_shapes(spec), rng)


def _forward_raw(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    """Pre-head outputs (N, output_dim) plus the cache needed for backprop."""
    if not np.all(np.isfinite(params)):
        raise ValueError("non-finite parameters")
    if spec.hidden_dim > 0:
        w1, b1, w2, b2 = unpack(spec, params)
        z1 = X @ w1.T + b1
        h = np.maximum(z1, 0.0)
        return h @ w2.T + b2, (z1, h)
    w, b = unpack(spec, params)
    return X @ w.T + b, None


def _backward_raw(spec: ModelSpec, params: np.ndarray, X: np.ndarray, cache,
                  dout: np.ndarray) -> np.ndarray:
    """Gradient of the loss wrt flat params given dL/d(pre-head output)."""
    if spec.hidden_dim > 0:
        w1, b1, w2, b2 = unpack(spec, params)
        z1, h = cache
        gw2 = dout.T @ h
        gb2 = dout.sum(axis=0)
        dh = dout @ w2
        dz1 = dh * (z1 > 0.0)
        gw1 = dz1.T @ X
        gb1 = dz1.sum(axis=0)
        return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])
    gw = dout.T @ X
    gb = dout.sum(axis=0)
    return np.concatenate([gw.ravel(), gb])


def forward_batch(spec: ModelSpec, params: np.ndarray, X: np.ndarray):
    """Head-applied batch output: (N, n_a) distributions or (N,) scalars."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    raw, _ = _forward_raw(spec, params, X)
    if spec.head == "softmax":
        return softmax(raw, axis=1)
    return raw[:, 0]


def forward(spec: ModelSpec, params: np.ndarray, observation: np.ndarray):
    """Single-observation evaluation; distribution or float per head."""
    out = forward_batch(spec, params, np.asarray(observation)[None, :])
    if spec.head == "softmax":
        return out[0]
    return float(out[0])


def _l2_penalty(shapes, params, lam):
    """lam * sum of squared weights (biases excluded); returns (value, grad)."""
    if lam == 0.0:
        return 0.0, np.zeros_like(params)
    grad = np.zeros_like(params)
    val, off = 0.0, 0
    for s in shapes:
        n = int(np.prod(s))
        if len(s) == 2:
            w = params[off:off + n]
            val += lam * float(w @ w)
            grad[off:off + n] = 2.0 * lam * w
        off += n
    return val, grad


def _kl_terms(probs: np.ndarray, targets: np.ndarray):
    """Per-row D(probs || targets) and the logit-space gradient factor."""
    tf = np.maximum(targets, KL_FLOOR)
    logratio = np.log(probs) - np.log(tf)
    kl = np.sum(probs * logratio, axis=1)
    # d kl_i / d logit_k = p_k * (logratio_k - kl_i)
    dlogits = probs * (logratio - kl[:, None])
    return kl, dlogits


def grad(spec: ModelSpec, params: np.ndarray, X: np.ndarray, targets: np.ndarray,
         loss_kind: str, l2_lambda: float = 0.0):
    """Analytic gradient of the mean batch loss (plus L2) for one model.

    mse_scalar: targets (N,) reals against a scalar/logit head.
    kl_to_target: targets (N, n_a) distributions against a softmax head.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    raw, cache = _forward_raw(spec, params, X)
    if loss_kind == "mse_scalar":
        if spec.head == "softmax":
            raise ValueError("mse_scalar needs a scalar or logit head")
        diff = raw[:, 0] - np.asarray(targets, dtype=np.float64)
        loss = float(np.mean(diff ** 2))
        dout = (2.0 / n) * diff[:, None]
    elif loss_kind == "kl_to_target":
        if spec.head != "softmax":
            raise ValueError("kl_to_target needs a softmax head")
        probs = softmax(raw, axis=1)
        kl, dlogits = _kl_terms(probs, np.asarray(targets, dtype=np.float64))
        loss = float(np.mean(kl))
        dout = dlogits / n
    else:
        raise ValueError("unsupported loss_kind %r for a single model" % loss_kind)
    g = _backward_raw(spec, params, X, cache, dout)
    pen, pgrad = _l2_penalty(layer_shapes(spec), params, l2_lambda)
    return g + pgrad, loss + pen


# ---------------------------------------------------------------------------
# Joint gate + weak-policy model (optionally sharing the hidden trunk)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateWeakSpec:
    """Weak policy (softmax head) and pre-gating score (logit head) together.

    With share_trunk and a positive hidden_dim the two heads read the same
    ReLU trunk; otherwise the two models are disjoint slices of one flat
    parameter vector (pi1 first, gate second).
    """

    input_dim: int
    hidden_dim: int
    n_actions: int
    share_trunk: bool = True
    init_seed: int = 0

    @property
    def shared(self) -> bool:
        return self.share_trunk and self.hidden_dim > 0

    @property
    def pi_spec(self) -> ModelSpec:
        return ModelSpec(self.input_dim, self.hidden_dim, self.n_actions, "softmax", self.init_seed)

    @property
    def gate_spec(self) -> ModelSpec:
        return ModelSpec(self.input_dim, self.hidden_dim, 1, "logit", self.init_seed + 1)


def gw_shapes(spec: GateWeakSpec) -> List[Tuple[int, ...]]:
    if spec.shared:
        h = spec.hidden_dim
        return [(h, spec.input_dim), (h,), (spec.n_actions, h), (spec.n_actions,), (1, h), (1,)]
    return layer_shapes(spec.pi_spec) + layer_shapes(spec.gate_spec)


def gw_param_count(spec: GateWeakSpec) -> int:
    return sum(int(np.prod(s)) for s in gw_shapes(spec))


def gw_mac_count(spec: GateWeakSpec):
    """(trunk + gate head, incremental weak head) MACs per evaluation."""
    if spec.shared:
        h = spec.hidden_dim
        return h * spec.input_dim + h, h * spec.n_actions
    return mac_count(spec.gate_spec), mac_count(spec.pi_spec)


def gw_init_params(spec: GateWeakSpec) -> np.ndarray:
    if spec.shared:
        rng = np.random.Generator(np.random.Philox(key=[int(spec.init_seed), 0]))
        return _init_from(gw_shapes(spec), rng)
    return np.concatenate([init_params(spec.pi_spec), init_params(spec.gate_spec)])


def _gw_split(spec: GateWeakSpec, params: np.ndarray):
    n_pi = param_count(spec.pi_spec)
    return params[:n_pi], params[n_pi:]


def gw_forward(spec: GateWeakSpec, params: np.ndarray, X: np.ndarray):
    """Batch evaluation: (pi1 distributions (N, n_a), gate scores (N,))."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if spec.shared:
        w1, b1, wp, bp, wg, bg = _unpack(gw_shapes(spec), params)
        h = np.maximum(X @ w1.T + b1, 0.0)
        return softmax(h @ wp.T + bp, axis=1), (h @ wg.T + bg)[:, 0]
    p_pi, p_g = _gw_split(spec, params)
    return forward_batch(spec.pi_spec, p_pi, X), forward_batch(spec.gate_spec, p_g, X)


def gw_pi1_handle(spec: GateWeakSpec, params: np.ndarray):
    """Weak-policy evaluation closure for rollouts."""
    def ev(state, obs):
        return gw_forward(spec, params, np.asarray(obs)[None, :])[0][0]
    return ev


def gw_grad(spec: GateWeakSpec, params: np.ndarray, X: np.ndarray,
            pi0_dists: np.ndarray, loss_kind: str, gate_targets: np.ndarray,
            kl_weights: np.ndarray = None, l2_lambda: float = 0.0):
    """Gradient of the joint gate + weak-policy training losses.

    api_m_step: mean_i [ w_i * D(pi1 || pi0) + D(q_i || sigmoid(gate_i)) ]
    with w_i = kl_weights (normally 1 - q_i) and gate_targets = q_i.

    epi_joint: mean_i [ D(pi1 || pi0) + (gate_i - target_i)^2 ] where the
    gate head regresses the good policy's entropy.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    pi0 = np.asarray(pi0_dists, dtype=np.float64)
    gate_targets = np.asarray(gate_targets, dtype=np.float64)

    if spec.shared:
        w1, b1, wp, bp, wg, bg = _unpack(gw_shapes(spec), params)
        z1 = X @ w1.T + b1
        h = np.maximum(z1, 0.0)
        pi_logits = h @ wp.T + bp
        g_tilde = (h @ wg.T + bg)[:, 0]
    else:
        p_pi, p_g = _gw_split(spec, params)
        pi_raw, pi_cache = _forward_raw(spec.pi_spec, p_pi, X)
        g_raw, g_cache = _forward_raw(spec.gate_spec, p_g, X)
        pi_logits, g_tilde = pi_raw, g_raw[:, 0]

    probs = softmax(pi_logits, axis=1)
    kl, dlogits_unit = _kl_terms(probs, pi0)

    if loss_kind == "api_m_step":
        w = np.ones(n) if kl_weights is None else np.asarray(kl_weights, dtype=np.float64)
        q = gate_targets
        s = sigmoid(g_tilde)
        sc = np.clip(s, KL_FLOOR, 1.0 - KL_FLOOR)
        gate_loss = q * (np.log(np.maximum(q, KL_FLOOR)) - np.log(sc)) \
            + (1.0 - q) * (np.log(np.maximum(1.0 - q, KL_FLOOR)) - np.log(1.0 - sc))
        dgate = (s - q) / n
    elif loss_kind == "epi_joint":
        w = np.ones(n) if kl_weights is None else np.asarray(kl_weights, dtype=np.float64)
        diff = g_tilde - gate_targets
        gate_loss = diff ** 2
        dgate = 2.0 * diff / n
    else:
        raise ValueError("unsupported joint loss_kind %r" % loss_kind)

    loss = float(np.mean(w * kl + gate_loss))
    dpi = dlogits_unit * (w / n)[:, None]

    if spec.shared:
        gwp = dpi.T @ h
        gbp = dpi.sum(axis=0)
        gwg = dgate[None, :] @ h
        gbg = np.array([dgate.sum()])
        dh = dpi @ wp + dgate[:, None] @ wg
        dz1 = dh * (z1 > 0.0)
        gw1 = dz1.T @ X
        gb1 = dz1.sum(axis=0)
        g = np.concatenate([gw1.ravel(), gb1, gwp.ravel(), gbp, gwg.ravel(), gbg])
    else:
        g_pi = _backward_raw(spec.pi_spec, p_pi, X, pi_cache, dpi)
        g_g = _backward_raw(spec.gate_spec, p_g, X, g_cache, dgate[:, None])
        g = np.concatenate([g_pi, g_g])

    pen, pgrad = _l2_penalty(gw_shapes(spec), params, l2_lambda)
    return g + pgrad, loss + pen


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float = 0.0005, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates the state, returns new params."""
    if gradient.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter / gradient / state shape mismatch")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * gradient ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class OptConfig:
    """Adam training loop settings (defaults follow the experimental setup)."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10_000
    batch_size: int = 1000
    l2_lambda: float = 0.0
    sample_seed: int = 0


def _minibatches(n: int, opt: OptConfig):
    """Yield index arrays, one per iteration; full batch when it fits."""
    if opt.batch_size >= n:
        idx = np.arange(n)
        for _ in range(opt.iterations):
            yield idx
    else:
        rng = np.random.Generator(np.random.Philox(key=[int(opt.sample_seed), 3]))
        for _ in range(opt.iterations):
            yield rng.integers(0, n, size=opt.batch_size)


def fit_model(spec: ModelSpec, X: np.ndarray, targets: np.ndarray,
              loss_kind: str, opt: OptConfig):
    """Minibatch-Adam fit of a single model; returns (params, loss history)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)
    params = init_params(spec)
    state = adam_init(len(params), opt.lr, opt.beta1, opt.beta2, opt.eps)
    history = []
    for idx in _minibatches(X.shape[0], opt):
        g, loss = grad(spec, params, X[idx], targets[idx], loss_kind, opt.l2_lambda)
        if not np.isfinite(loss):
            raise FloatingPointError("training loss diverged (non-finite)")
        params = adam_step(state, params, g)
        history.append(loss)
    return params, history
