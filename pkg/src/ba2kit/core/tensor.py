"""
Reverse-mode differentiation for the operations a small ConvNet needs.

Activations are NHWC arrays, kernels are (KH, KW, C_in, C_out). Every op is a
``Function`` subclass whose ``forward`` saves the context ``backward`` needs;
a ``Tape`` records applied functions in order and replays them in reverse.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NonFiniteError, ShapeError, TapeError

# Defaults
DEFAULT_DTYPE = np.float32
DEFAULT_BN_MOMENTUM = 0.1
DEFAULT_BN_EPSILON = 1e-5

logger = logging.getLogger(__name__)

Grads = Tuple[Optional[np.ndarray], ...]


def check_finite(arr: np.ndarray, what: str) -> None:
    """Raise NonFiniteError if ``arr`` holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")


def check_tensor4(arr: np.ndarray, what: str = "input") -> None:
    """Validate an (N, H, W, C) activation tensor."""
    if arr.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (N, H, W, C), got shape {arr.shape}")


def check_kernel(kernel: np.ndarray) -> None:
    """Validate a (2K_h+1, 2K_w+1, C_in, C_out) kernel."""
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be rank 4 (KH, KW, C_in, C_out), got {kernel.shape}")
    kh, kw = kernel.shape[:2]
    if kh % 2 != 1 or kw % 2 != 1:
        raise ShapeError(f"kernel spatial extents must be odd, got {kh}x{kw}")


def output_size(size: int, window: int, stride: int, padding: int) -> int:
    """Spatial output extent for a sliding window."""
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be nonnegative, got {padding}")
    if size + 2 * padding < window:
        raise ShapeError(
            f"window {window} larger than padded input {size + 2 * padding}"
        )
    return (size + 2 * padding - window) // stride + 1


def _windows(
    x: np.ndarray, kh: int, kw: int, stride: int, padding: int, fill: float = 0.0
) -> np.ndarray:
    """Strided (N, Ho, Wo, C, KH, KW) view over a padded copy of ``x``."""
    if padding:
        x = np.pad(
            x,
            ((0, 0), (padding, padding), (padding, padding), (0, 0)),
            constant_values=fill,
        )
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """
    Unfold ``x`` into an (N*Ho*Wo, C*KH*KW) patch matrix.

    Columns are ordered channel-major, then kernel rows, then kernel columns;
    this fixes the reduction order of every convolution.
    """
    win = _windows(x, kh, kw, stride, padding)
    n, ho, wo = win.shape[:3]
    return win.reshape(n * ho * wo, -1)


def col2im(
    cols: np.ndarray,
    x_shape: Tuple[int, ...],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of ``im2col``: scatter-add patch gradients back to the input."""
    n, h, w, c = x_shape
    ho = output_size(h, kh, stride, padding)
    wo = output_size(w, kw, stride, padding)
    patches = cols.reshape(n, ho, wo, c, kh, kw)
    padded = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            padded[
                :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride, :
            ] += patches[..., a, b]
    return padded[:, padding : padding + h, padding : padding + w, :]


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """Reshape (KH, KW, C_in, C_out) to (C_in*KH*KW, C_out) matching ``im2col``."""
    kh, kw, c_in, c_out = kernel.shape
    return kernel.transpose(2, 0, 1, 3).reshape(c_in * kh * kw, c_out)


def kernel_from_matrix(mat: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Inverse of ``kernel_matrix``."""
    kh, kw, c_in, c_out = shape
    return mat.reshape(c_in, kh, kw, c_out).transpose(1, 2, 0, 3)


class Function:
    """
    Base class for a differentiable operation.

    ``forward`` receives raw arrays and stores whatever ``backward`` needs on
    ``self``. ``backward`` receives dL/d(output) and returns one gradient (or
    None) per input. ``needs_input_grad`` is filled in by the tape.
    """

    def __init__(self) -> None:
        self.needs_input_grad: Tuple[bool, ...] = ()
        self._forwarded = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Grads:
        raise NotImplementedError

    def _needs(self, index: int) -> bool:
        if not self.needs_input_grad:
            return True
        return self.needs_input_grad[index]

    def _require_context(self) -> None:
        if not self._forwarded:
            raise TapeError(f"{type(self).__name__}.backward called without a recorded forward")


class Conv2d(Function):
    """Zero-padded 2-D convolution; the activation is applied by a separate op."""

    def forward(
        self, x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0
    ) -> np.ndarray:
        check_tensor4(x)
        check_kernel(kernel)
        if x.shape[3] != kernel.shape[2]:
            raise ShapeError(
                f"input has {x.shape[3]} channels, kernel expects {kernel.shape[2]}"
            )
        check_finite(x, "conv2d input")
        kh, kw = kernel.shape[:2]
        ho = output_size(x.shape[1], kh, stride, padding)
        wo = output_size(x.shape[2], kw, stride, padding)

        cols = im2col(x, kh, kw, stride, padding)
        kmat = kernel_matrix(kernel)
        out = cols @ kmat

        self.x_shape = x.shape
        self.k_shape = kernel.shape
        self.stride, self.padding = stride, padding
        self.cols, self.kmat = cols, kmat
        self._forwarded = True
        return out.reshape(x.shape[0], ho, wo, kernel.shape[3])

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        kh, kw = self.k_shape[:2]
        g = grad.reshape(-1, self.k_shape[3])
        dx = dk = None
        if self._needs(0):
            dx = col2im(g @ self.kmat.T, self.x_shape, kh, kw, self.stride, self.padding)
        if self._needs(1):
            dk = kernel_from_matrix(self.cols.T @ g, self.k_shape)
        return dx, dk


class MaskedConv2d(Function):
    """
    Convolution gated per input channel by binarized switches.

    Inputs are (x, kernel, s_tilde). The forward pass thresholds ``s_tilde``
    and only materializes active channels. The backward pass treats the
    threshold as the identity, so every switch gets a gradient, including
    the ones that are currently off.
    """

    def forward(
        self,
        x: np.ndarray,
        kernel: np.ndarray,
        s_tilde: np.ndarray,
        stride: int = 1,
        padding: int = 0,
        on_allocate: Optional[Callable[[int, int], None]] = None,
    ) -> np.ndarray:
        check_tensor4(x)
        check_kernel(kernel)
        c_in = kernel.shape[2]
        if x.shape[3] != c_in:
            raise ShapeError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
        if s_tilde.shape != (c_in,):
            raise ShapeError(f"switch vector has shape {s_tilde.shape}, expected ({c_in},)")
        check_finite(x, "masked conv input")

        kh, kw, _, c_out = kernel.shape
        ho = output_size(x.shape[1], kh, stride, padding)
        wo = output_size(x.shape[2], kw, stride, padding)
        bits = (s_tilde > 0.0).astype(x.dtype)
        active = np.flatnonzero(bits)

        self.x, self.kernel, self.bits = x, kernel, bits
        self.stride, self.padding = stride, padding
        self._forwarded = True

        if active.size == 0:
            out = np.zeros((x.shape[0], ho, wo, c_out), dtype=x.dtype)
            consumed = 0
        elif active.size == c_in:
            out = (im2col(x, kh, kw, stride, padding) @ kernel_matrix(kernel)).reshape(
                x.shape[0], ho, wo, c_out
            )
            consumed = x.nbytes
        else:
            x_active = np.ascontiguousarray(x[..., active])
            cols = im2col(x_active, kh, kw, stride, padding)
            out = (cols @ kernel_matrix(kernel[:, :, active, :])).reshape(
                x.shape[0], ho, wo, c_out
            )
            consumed = x_active.nbytes
        if on_allocate is not None:
            on_allocate(consumed, out.nbytes)
        return out

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        kh, kw, c_in, c_out = self.kernel.shape
        taps = kh * kw
        g = grad.reshape(-1, c_out)
        kmat = kernel_matrix(self.kernel)
        row_mask = np.repeat(self.bits, taps)

        # Switch gradients need phi_c for every channel, active or not.
        gcols = g @ kmat.T
        need_cols = self._needs(1) or self._needs(2)
        cols = im2col(self.x, kh, kw, self.stride, self.padding) if need_cols else None

        dx = dk = ds = None
        if self._needs(0):
            dx = col2im(
                gcols * row_mask[None, :], self.x.shape, kh, kw, self.stride, self.padding
            )
        if self._needs(1):
            dk = kernel_from_matrix((cols.T @ g) * row_mask[:, None], self.kernel.shape)
        if self._needs(2):
            ds = (cols * gcols).reshape(-1, c_in, taps).sum(axis=(0, 2))
        return dx, dk, ds


class BatchNorm2d(Function):
    """
    Per-channel batch normalization over (N, H, W).

    Inputs are (x, gamma, beta). Running statistics are passed as keyword
    arrays and updated in place in training mode.
    """

    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        running_mean: Optional[np.ndarray] = None,
        running_var: Optional[np.ndarray] = None,
        training: bool = True,
        momentum: float = DEFAULT_BN_MOMENTUM,
        eps: float = DEFAULT_BN_EPSILON,
    ) -> np.ndarray:
        check_tensor4(x)
        c = x.shape[3]
        for name, arr in (("gamma", gamma), ("beta", beta)):
            if arr.shape != (c,):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({c},)")
        if eps <= 0:
            raise ConfigError(f"epsilon must be positive, got {eps}")

        axes = (0, 1, 2)
        count = x.shape[0] * x.shape[1] * x.shape[2]
        if training:
            if count == 0:
                raise ShapeError("batch normalization needs a nonempty batch in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running_mean is not None and running_var is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            if running_mean is None or running_var is None:
                raise ShapeError("eval mode requires running statistics")
            mean, var = running_mean, running_var

        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mean) * inv_std

        self.training = training
        self.x_hat, self.inv_std, self.gamma = x_hat, inv_std, gamma
        self.count = count
        self._forwarded = True
        return (gamma * x_hat + beta).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        axes = (0, 1, 2)
        dbeta = grad.sum(axis=axes)
        dgamma = (grad * self.x_hat).sum(axis=axes)
        dx = None
        if self._needs(0):
            if self.training:
                n = self.count
                dx = (self.gamma * self.inv_std / n) * (n * grad - dbeta - self.x_hat * dgamma)
            else:
                dx = grad * self.gamma * self.inv_std
        return dx, dgamma, dbeta


class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        self._forwarded = True
        return x * self.mask

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return (grad * self.mask,)


class AvgPool2d(Function):
    """Average pooling; zero padding counts toward the window."""

    def forward(
        self, x: np.ndarray, window: Tuple[int, int], stride: int = 1, padding: int = 0
    ) -> np.ndarray:
        check_tensor4(x)
        kh, kw = window
        output_size(x.shape[1], kh, stride, padding)
        output_size(x.shape[2], kw, stride, padding)
        self.x_shape, self.window = x.shape, window
        self.stride, self.padding = stride, padding
        self._forwarded = True
        return _windows(x, kh, kw, stride, padding).mean(axis=(4, 5))

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        kh, kw = self.window
        per_tap = grad / (kh * kw)
        cols = np.repeat(per_tap[..., None], kh * kw, axis=-1)
        return (col2im(cols, self.x_shape, kh, kw, self.stride, self.padding),)


class MaxPool2d(Function):
    """Max pooling; padded positions never win."""

    def forward(
        self, x: np.ndarray, window: Tuple[int, int], stride: int = 1, padding: int = 0
    ) -> np.ndarray:
        check_tensor4(x)
        kh, kw = window
        output_size(x.shape[1], kh, stride, padding)
        output_size(x.shape[2], kw, stride, padding)
        win = _windows(x, kh, kw, stride, padding, fill=-np.inf)
        flat = win.reshape(*win.shape[:4], kh * kw)
        self.argmax = flat.argmax(axis=-1)
        self.x_shape, self.window = x.shape, window
        self.stride, self.padding = stride, padding
        self._forwarded = True
        return np.take_along_axis(flat, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        kh, kw = self.window
        taps = np.arange(kh * kw)
        cols = (self.argmax[..., None] == taps) * grad[..., None]
        return (col2im(cols, self.x_shape, kh, kw, self.stride, self.padding),)


class Flatten(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.shape = x.shape
        self._forwarded = True
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return (grad.reshape(self.shape),)


class Dense(Function):
    """Affine layer: x (N, F) @ w (F, O) + b (O,)."""

    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise ShapeError(
                f"dense shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}"
            )
        self.x, self.w = x, w
        self._forwarded = True
        return x @ w + b

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        dx = grad @ self.w.T if self._needs(0) else None
        dw = self.x.T @ grad if self._needs(1) else None
        return dx, dw, grad.sum(axis=0)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
        self._forwarded = True
        return a + b

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return grad, grad


class Mean(Function):
    """Mean of all elements, as a scalar."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.size == 0:
            raise ShapeError("mean of an empty array")
        self.shape = x.shape
        self._forwarded = True
        return np.asarray(x.mean(), dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return (np.full(self.shape, grad / np.prod(self.shape), dtype=grad.dtype),)


class Affine(Function):
    """``scale * (x + shift)`` with constant scale and shift."""

    def forward(self, x: np.ndarray, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
        self.scale = scale
        self._forwarded = True
        return ((x + shift) * scale).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return (grad * self.scale,)


class BinarizeSTE(Function):
    """Threshold at 0 (0 for x <= 0, else 1); the backward pass is the identity."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._forwarded = True
        return (x > 0.0).astype(x.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        return (grad,)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy over the batch; class probabilities kept on ``probs``."""

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
        if logits.ndim != 2:
            raise ShapeError(f"logits must be (N, K), got {logits.shape}")
        n, k = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels have shape {labels.shape}, expected ({n},)")
        if n and (labels.min() < 0 or labels.max() >= k):
            raise DataError(f"label index out of range for {k} classes")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        self.probs = np.exp(log_probs)
        self.labels = labels
        self._forwarded = True
        return np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> Grads:
        self._require_context()
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (grad / n),)


class Parameter:
    """A trainable array with its gradient slot."""

    def __init__(self, value: np.ndarray, name: str = "", frozen: bool = False):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.frozen = frozen

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def copy(self) -> "Parameter":
        return Parameter(self.value.copy(), name=self.name, frozen=self.frozen)

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {state})"


@dataclass(eq=False)
class Node:
    """A value slot on the tape."""

    id: int
    value: np.ndarray
    requires_grad: bool = False
    grad: Optional[np.ndarray] = None
    name: str = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


@dataclass
class TapeRecord:
    fn: Function
    inputs: Tuple[int, ...]
    output: int


class Tape:
    """
    Ordered record of applied functions.

    A tape and its nodes are single-writer; use one tape per thread.
    """

    def __init__(self, dtype: Optional[np.dtype] = None):
        self.dtype = dtype
        self.nodes: Dict[int, Node] = {}
        self.records: List[TapeRecord] = []
        self._params: Dict[int, Tuple[Parameter, Node]] = {}

    def _new_node(self, value: np.ndarray, requires_grad: bool, name: str) -> Node:
        node = Node(id=len(self.nodes), value=value, requires_grad=requires_grad, name=name)
        self.nodes[node.id] = node
        return node

    def leaf(self, value, requires_grad: bool = False, name: str = "") -> Node:
        """Add an input value."""
        value = np.asarray(value)
        if self.dtype is not None and np.issubdtype(value.dtype, np.floating):
            value = value.astype(self.dtype, copy=False)
        return self._new_node(value, requires_grad, name)

    def param(self, parameter: Parameter) -> Node:
        """Node for a parameter; the same parameter always maps to the same node."""
        key = id(parameter)
        if key not in self._params:
            node = self._new_node(parameter.value, not parameter.frozen, parameter.name)
            self._params[key] = (parameter, node)
        return self._params[key][1]

    def apply(self, fn: Function, *inputs: Node, **kwargs) -> Node:
        """Run ``fn`` forward on ``inputs`` and record it."""
        fn.needs_input_grad = tuple(n.requires_grad for n in inputs)
        out = fn.forward(*(n.value for n in inputs), **kwargs)
        check_finite(out, f"{type(fn).__name__} output")
        node = self._new_node(out, any(fn.needs_input_grad), type(fn).__name__)
        self.records.append(TapeRecord(fn, tuple(n.id for n in inputs), node.id))
        return node

    def backward(self, loss: Node) -> None:
        """Populate ``grad`` on every node; unreachable nodes get zeros."""
        if loss.value.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes.values():
            node.grad = np.zeros_like(node.value)
        loss.grad = np.ones_like(loss.value)

        for record in reversed(self.records):
            out = self.nodes[record.output]
            if not out.requires_grad:
                continue
            grads = record.fn.backward(out.grad)
            for node_id, grad in zip(record.inputs, grads):
                node = self.nodes[node_id]
                if grad is None or not node.requires_grad:
                    continue
                node.grad += grad.reshape(node.value.shape)

    def accumulate_param_grads(self) -> None:
        """Add node gradients into their parameters' ``grad`` slots."""
        for parameter, node in self._params.values():
            if node.requires_grad and node.grad is not None:
                parameter.grad += node.grad

    @property
    def parameters(self) -> List[Parameter]:
        return [p for p, _ in self._params.values()]


# Tape-level helpers


def conv2d(tape: Tape, x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    return tape.apply(Conv2d(), x, kernel, stride=stride, padding=padding)


def batch_norm(
    tape: Tape,
    x: Node,
    gamma: Node,
    beta: Node,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = DEFAULT_BN_MOMENTUM,
    eps: float = DEFAULT_BN_EPSILON,
) -> Node:
    return tape.apply(
        BatchNorm2d(),
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


def relu(tape: Tape, x: Node) -> Node:
    return tape.apply(ReLU(), x)


def avg_pool2d(
    tape: Tape, x: Node, window: Tuple[int, int], stride: int = 1, padding: int = 0
) -> Node:
    return tape.apply(AvgPool2d(), x, window=window, stride=stride, padding=padding)


def max_pool2d(
    tape: Tape, x: Node, window: Tuple[int, int], stride: int = 1, padding: int = 0
) -> Node:
    return tape.apply(MaxPool2d(), x, window=window, stride=stride, padding=padding)


def global_avg_pool(tape: Tape, x: Node) -> Node:
    """(N, H, W, C) -> (N, C)."""
    pooled = avg_pool2d(tape, x, window=x.shape[1:3], stride=1)
    return tape.apply(Flatten(), pooled)


def dense(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    return tape.apply(Dense(), x, w, b)


def add(tape: Tape, a: Node, b: Node) -> Node:
    return tape.apply(Add(), a, b)


def softmax_cross_entropy(tape: Tape, logits: Node, labels: np.ndarray) -> Tuple[Node, np.ndarray]:
    """Return the mean loss node and per-class probabilities."""
    fn = SoftmaxCrossEntropy()
    loss = tape.apply(fn, logits, labels=labels)
    return loss, fn.probs


def sum_scalars(tape: Tape, terms: Sequence[Node]) -> Node:
    total = terms[0]
    for term in terms[1:]:
        total = add(tape, total, term)
    return total


# Array-level entry points


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Plain convolution without recording."""
    return Conv2d().forward(x, kernel, stride=stride, padding=padding)


def conv2d_backward(ctx: Optional[Conv2d], upstream: np.ndarray) -> Grads:
    """Input and kernel gradients for a forwarded ``Conv2d`` context."""
    if ctx is None:
        raise TapeError("conv2d_backward needs the forward context")
    return ctx.backward(upstream)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = DEFAULT_BN_MOMENTUM,
    eps: float = DEFAULT_BN_EPSILON,
) -> np.ndarray:
    return BatchNorm2d().forward(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )
