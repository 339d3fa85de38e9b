"""Adversarial feature alignment at desk scale.

A small manually-differentiated encoder/discriminator pair trained jointly:
the discriminator separates source (splat-rendered) from target (real-camera)
features, while a gradient reversal layer pushes the encoder toward
domain-invariant features. Alignment is scored with a nearest-neighbor
separability index and a linear-probe accuracy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_CLAMP = 1e-7


def grl_backward(upstream_grad: np.ndarray, lam: float) -> np.ndarray:
    """Gradient reversal: identity forward, -lambda * gradient backward."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return -lam * upstream_grad


class Mlp:
    """Dense MLP with tanh hidden layers and manual forward/backward."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 out_activation: str = "linear"):
        self.sizes = list(sizes)
        self.out_activation = out_activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.zero_grad()
        self._cache = None

    def zero_grad(self):
        self.w_grads = [np.zeros_like(w) for w in self.weights]
        self.b_grads = [np.zeros_like(b) for b in self.biases]

    def parameters(self):
        return self.weights + self.biases

    def gradients(self):
        return self.w_grads + self.b_grads

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        acts = [x]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < n - 1:
                h = np.tanh(a)
            elif self.out_activation == "tanh":
                h = np.tanh(a)
            elif self.out_activation == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-a))
            else:
                h = a
            acts.append(h)
        self._cache = acts
        return h

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns gradient w.r.t. the input."""
        acts = self._cache
        g = grad_out
        n = len(self.weights)
        for i in range(n - 1, -1, -1):
            h = acts[i + 1]
            if i < n - 1 or self.out_activation == "tanh":
                g = g * (1.0 - h * h)
            elif self.out_activation == "sigmoid":
                g = g * h * (1.0 - h)
            self.w_grads[i] += acts[i].T @ g
            self.b_grads[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g

    def sgd_step(self, lr: float):
        for p, g in zip(self.parameters(), self.gradients()):
            p -= lr * g


@dataclass
class DaConfig:
    input_dim: int = 16
    content_dim: int = 4
    encoder_hidden: tuple = (256, 64)
    disc_hidden: tuple = (32,)
    lambda_grl: float = 1.0
    lambda1: float = 1.0   # task-loss weight
    lambda2: float = 1.0   # domain-loss weight
    lr: float = 0.05


def demo_config(lambda_grl: float = 1.0) -> DaConfig:
    """Configuration tuned for the synthetic two-domain demo.

    A narrow feature layer and a stronger domain weight are needed for the
    adversarial game to actually merge the two feature distributions at this
    scale; the wider default encoder keeps residual style directions alive.
    """
    return DaConfig(input_dim=16, content_dim=4, encoder_hidden=(64, 6),
                    disc_hidden=(32,), lambda_grl=lambda_grl,
                    lambda1=1.0, lambda2=3.0, lr=0.1)


class DaNetwork:
    """Encoder + discriminator + content-regression head, jointly optimized.

    The content head is the pluggable task loss standing in for the policy
    objective; the domain branch flows through the gradient reversal layer
    into the encoder.
    """

    def __init__(self, cfg: DaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Mlp([cfg.input_dim, *cfg.encoder_hidden], rng,
                           out_activation="tanh")
        feat = cfg.encoder_hidden[-1]
        self.discriminator = Mlp([feat, *cfg.disc_hidden, 1], rng,
                                 out_activation="sigmoid")
        self.head = Mlp([feat, cfg.content_dim], rng)

    def modules(self):
        return (self.encoder, self.discriminator, self.head)

    def zero_grad(self):
        for m in self.modules():
            m.zero_grad()

    def sgd_step(self, lr: float | None = None):
        lr = self.cfg.lr if lr is None else lr
        for m in self.modules():
            m.sgd_step(lr)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.encoder.forward(x)

    # -- losses ------------------------------------------------------------

    def task_loss(self, x: np.ndarray, content: np.ndarray,
                  backward: bool = True) -> float:
        """Mean squared content-regression error; gradients into head+encoder."""
        z = self.encoder.forward(x)
        pred = self.head.forward(z)
        diff = pred - content
        loss = float(np.mean(diff * diff))
        if backward:
            g = 2.0 * diff / diff.size
            gz = self.head.backward(g)
            self.encoder.backward(gz)
        return loss

    def da_loss(self, x_source: np.ndarray, x_target: np.ndarray,
                backward: bool = True, da_weight: float = 1.0) -> float:
        """Binary cross-entropy of the discriminator over both domains.

        Backward populates discriminator gradients directly and encoder
        gradients through the reversal layer (scaled by -lambda_grl).
        """
        if len(x_source) == 0 or len(x_target) == 0:
            raise ValueError("both domains must be non-empty")
        loss = 0.0
        for x, is_source in ((x_source, True), (x_target, False)):
            z = self.encoder.forward(x)
            d = self.discriminator.forward(z)
            p = np.clip(d, _CLAMP, 1.0 - _CLAMP)
            if is_source:
                loss += float(-np.mean(np.log(p)))
                gd = np.where((d > _CLAMP) & (d < 1.0 - _CLAMP),
                              -1.0 / p, 0.0) / len(x)
            else:
                loss += float(-np.mean(np.log(1.0 - p)))
                gd = np.where((d > _CLAMP) & (d < 1.0 - _CLAMP),
                              1.0 / (1.0 - p), 0.0) / len(x)
            if backward:
                gz = self.discriminator.backward(da_weight * gd)
                self.encoder.backward(grl_backward(gz, self.cfg.lambda_grl))
        return loss

    def total_loss(self, x_source: np.ndarray, x_target: np.ndarray,
                   content_source: np.ndarray, content_target: np.ndarray
                   ) -> tuple[float, float, float]:
        """Combined objective lambda1 * task + lambda2 * domain, with gradients.

        The task term regresses content in both domains; the domain term is
        the discriminator BCE. Returns (total, task, domain) scalars.
        """
        x_task = np.concatenate([x_source, x_target])
        c_task = np.concatenate([content_source, content_target])
        task = self.task_loss(x_task, c_task, backward=False)
        # scale gradients by the loss weights during accumulation
        z = self.encoder.forward(x_task)
        pred = self.head.forward(z)
        g = self.cfg.lambda1 * 2.0 * (pred - c_task) / pred.size
        self.encoder.backward(self.head.backward(g))
        domain = self.da_loss(x_source, x_target, backward=True,
                              da_weight=self.cfg.lambda2)
        return self.cfg.lambda1 * task + self.cfg.lambda2 * domain, task, domain


def da_loss_value(d_source: np.ndarray, d_target: np.ndarray) -> float:
    """Batch-mean discriminator BCE from raw discriminator outputs."""
    ps = np.clip(d_source, _CLAMP, 1.0 - _CLAMP)
    pt = np.clip(d_target, _CLAMP, 1.0 - _CLAMP)
    return float(-np.mean(np.log(ps)) - np.mean(np.log(1.0 - pt)))


# ---------------------------------------------------------------------------
# alignment metrics


def gsi(features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of points whose nearest neighbor shares their label.

    Ties resolve to the lower index. 1.0 = fully separable domains,
    ~0.5 = fully mixed under balanced labels.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = features.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    d2 = np.sum(features * features, axis=1)
    dist = d2[:, None] + d2[None, :] - 2.0 * features @ features.T
    np.fill_diagonal(dist, np.inf)
    nn = np.argmin(dist, axis=1)  # argmin takes the lowest index on ties
    return float(np.mean(labels[nn] == labels))


def probe_accuracy(features: np.ndarray, labels: np.ndarray,
                   train_fraction: float = 0.8, seed: int = 0,
                   lr: float = 0.1, iterations: int = 500,
                   l2: float = 1e-4) -> float:
    """Held-out accuracy of a multinomial logistic regression probe.

    Full-batch gradient descent on standardized features with a
    deterministic seeded split.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n = features.shape[0]
    classes = np.unique(labels)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    train, test = perm[:n_train], perm[n_train:]
    if len(test) == 0 or len(np.unique(labels[train])) < 2:
        raise ValueError("degenerate train/test split")

    mu = features[train].mean(axis=0)
    sd = np.maximum(features[train].std(axis=0), 1e-8)
    xtr = (features[train] - mu) / sd
    xte = (features[test] - mu) / sd
    y = np.searchsorted(classes, labels)
    onehot = np.eye(len(classes))[y[train]]

    W = np.zeros((features.shape[1], len(classes)))
    b = np.zeros(len(classes))
    for _ in range(iterations):
        logits = xtr @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(xtr)
        W -= lr * (xtr.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(xte @ W + b, axis=1)
    return float(np.mean(pred == y[test]))


# ---------------------------------------------------------------------------
# synthetic two-domain demo


@dataclass
class DaReport:
    rows: list[dict] = field(default_factory=list)
    diverged: bool = False

    def final(self) -> dict:
        return self.rows[-1]


def make_two_domain_dataset(rng: np.random.Generator, n_per_domain: int = 512,
                            content_dim: int = 4, input_dim: int = 16,
                            style_scale: float = 1.0, noise: float = 0.05):
    """Shared content plus a fixed per-domain affine style shift.

    Returns (x_source, x_target, content_source, content_target).
    """
    mix = rng.normal(size=(content_dim, input_dim)) / np.sqrt(content_dim)
    shift_a = rng.normal(size=(input_dim, input_dim)) * 0.25 * style_scale + np.eye(input_dim)
    shift_b = rng.normal(size=input_dim) * style_scale
    cs = rng.normal(size=(n_per_domain, content_dim))
    ct = rng.normal(size=(n_per_domain, content_dim))
    xs = cs @ mix + rng.normal(scale=noise, size=(n_per_domain, input_dim))
    xt = ct @ mix @ shift_a + shift_b + rng.normal(scale=noise, size=(n_per_domain, input_dim))
    return xs, xt, cs, ct


def _domain_metrics(net: DaNetwork, xs, xt) -> tuple[float, float, float]:
    """(discriminator accuracy, gsi, probe accuracy) on held-out features."""
    zs = net.features(xs)
    zt = net.features(xt)
    ds = net.discriminator.forward(zs)
    dt = net.discriminator.forward(zt)
    disc_acc = 0.5 * (float(np.mean(ds >= 0.5)) + float(np.mean(dt < 0.5)))
    feats = np.concatenate([zs, zt])
    labels = np.concatenate([np.ones(len(zs)), np.zeros(len(zt))])
    return disc_acc, gsi(feats, labels), probe_accuracy(feats, labels)


def train_da_demo(net: DaNetwork, epochs: int, rng: np.random.Generator,
                  data=None, batch_size: int = 32,
                  n_train: int = 512, n_eval: int = 512) -> DaReport:
    """Joint adversarial training on the synthetic two-domain task.

    Reports per-epoch domain loss, held-out discriminator accuracy, GSI and
    probe accuracy; row 0 is the untrained baseline.
    """
    if data is None:
        xs, xt, cs, ct = make_two_domain_dataset(rng, n_train + n_eval,
                                                 net.cfg.content_dim,
                                                 net.cfg.input_dim)
    else:
        xs, xt, cs, ct = data
        n_train = min(n_train, len(xs) - 1)
    xs_tr, xs_ev = xs[:n_train], xs[n_train:]
    xt_tr, xt_ev = xt[:n_train], xt[n_train:]
    cs_tr, ct_tr = cs[:n_train], ct[:n_train]

    report = DaReport()

    def record(epoch: int, da: float, task: float):
        disc_acc, g, probe = _domain_metrics(net, xs_ev, xt_ev)
        report.rows.append({"epoch": epoch, "da_loss": da, "task_loss": task,
                            "disc_acc": disc_acc, "gsi": g, "probe_acc": probe})

    base_da = net.da_loss(xs_ev, xt_ev, backward=False)
    base_task = net.task_loss(np.concatenate([xs_ev, xt_ev]),
                              np.concatenate([cs[n_train:], ct[n_train:]]),
                              backward=False)
    record(0, base_da, base_task)

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_train)
        ep_da = ep_task = 0.0
        n_batches = 0
        for lo in range(0, n_train, batch_size):
            sel = order[lo:lo + batch_size]
            net.zero_grad()
            _, task, da = net.total_loss(xs_tr[sel], xt_tr[sel],
                                         cs_tr[sel], ct_tr[sel])
            if not (np.isfinite(task) and np.isfinite(da)):
                report.diverged = True
                record(epoch, da, task)
                return report
            net.sgd_step()
            ep_da += da
            ep_task += task
            n_batches += 1
        record(epoch, ep_da / n_batches, ep_task / n_batches)
    return report


# ---------------------------------------------------------------------------
# feature dump I/O: int64 LE (N, d) header, float32 rows, N label bytes


def write_feature_dump(path, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels).astype(np.uint8)
    n, d = features.shape
    if labels.shape[0] != n:
        raise ValueError("labels length must match feature rows")
    with open(path, "wb") as f:
        f.write(struct.pack("<qq", n, d))
        f.write(features.astype("<f4").tobytes(order="C"))
        f.write(labels.tobytes())


def read_feature_dump(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ValueError("truncated feature dump header")
        n, d = struct.unpack("<qq", header)
        if n < 0 or d <= 0:
            raise ValueError(f"invalid feature dump header: N={n}, d={d}")
        feats = np.frombuffer(f.read(4 * n * d), dtype="<f4")
        if feats.size != n * d:
            raise ValueError("truncated feature payload")
        labels = np.frombuffer(f.read(n), dtype=np.uint8)
        if labels.size != n:
            raise ValueError("truncated label payload")
    return feats.reshape(n, d).astype(np.float64), labels.copy()
