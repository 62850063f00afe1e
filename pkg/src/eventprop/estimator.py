"""scikit-learn classifier wrapping EventProp training of a spiking network."""
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import LayerParams, init_weights
from .fabric import Fabric
from .loss import ABSTAIN, LossConfig
from .optim import AdamState, adam_step, epoch_decay
from .reference import ReferenceEngine
from .validation import check_spike_data, check_spike_steps


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    ms_per_batch: float
    guards: int
    silent: int

    HEADER = "epoch,split,loss,accuracy,ms_per_batch,guards,silent"

    def csv(self):
        return (f"{self.epoch},{self.split},{float(self.loss)!r},{float(self.accuracy)!r},"
                f"{self.ms_per_batch:.3f},{self.guards},{self.silent}")


class EventPropClassifier(ClassifierMixin, BaseEstimator):
    """Spiking network classifier trained with event-based backpropagation.

    ``X`` holds one row of input spike steps per sample (negative = no
    spike); the class is read from which output neuron fires first.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden LIF layers.
    n_steps : int
        Simulation steps per sample (T).
    dt, tau_s, tau_m : float
        Tick width and synaptic/membrane time constants.
    adjoint_variant : {"exponential_euler", "jump_first", "as_printed"}
        Discretisation of the current adjoint.
    tau_0, tau_1, alpha_reg, reg_sign : float
        Time-to-first-spike loss parameters.
    lr, gamma, weight_decay, beta1, beta2, adam_eps : float
        Adam step size, per-epoch learning-rate decay and Adam constants.
    grad_reduction : {"sum", "mean"}
    init_scales : sequence of (s_mu, s_sigma)
        Per-layer scale of the initial weight mean and spread.
    batch_size, epochs : int
    engine : {"reference", "fabric"}
        Dense single-process engine or the message-passing fabric. Both give
        bit-identical weights.
    n_workers : int
        Worker threads for the fabric engine.
    random_state : int or None
        Seeds weight initialisation and shuffling.
    """

    def __init__(self, hidden_layer_sizes=(120,), n_steps=28, dt=1.0, tau_s=10.0,
                 tau_m=40.0, adjoint_variant="exponential_euler", singularity_eps=1e-6,
                 tau_0=1.5, tau_1=100.0, alpha_reg=0.01, reg_sign=-1.0,
                 lr=0.002, gamma=0.93, weight_decay=6.5e-7, beta1=0.9,
                 beta2=0.999, adam_eps=1e-8, grad_reduction="sum",
                 decoupled_wd=False, init_scales=((3.2, 3.2), (5.2, 2.8)),
                 batch_size=22, epochs=40, shuffle=True, engine="reference",
                 n_workers=1, trace=None, random_state=None, verbose=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.n_steps = n_steps
        self.dt = dt
        self.tau_s = tau_s
        self.tau_m = tau_m
        self.adjoint_variant = adjoint_variant
        self.singularity_eps = singularity_eps
        self.tau_0 = tau_0
        self.tau_1 = tau_1
        self.alpha_reg = alpha_reg
        self.reg_sign = reg_sign
        self.lr = lr
        self.gamma = gamma
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.grad_reduction = grad_reduction
        self.decoupled_wd = decoupled_wd
        self.init_scales = init_scales
        self.batch_size = batch_size
        self.epochs = epochs
        self.shuffle = shuffle
        self.engine = engine
        self.n_workers = n_workers
        self.trace = trace
        self.random_state = random_state
        self.verbose = verbose

    # -- construction helpers ---------------------------------------------

    def _layer_params(self):
        return LayerParams(self.tau_s, self.tau_m, self.dt,
                           adjoint_variant=self.adjoint_variant,
                           singularity_eps=self.singularity_eps)

    def _loss_config(self):
        return LossConfig(self.tau_0, self.tau_1, self.alpha_reg, self.dt,
                          len(self.classes_), self.n_steps, self.reg_sign)

    def _validate_params(self):
        if self.engine not in ("reference", "fabric"):
            raise ValueError(f"engine must be 'reference' or 'fabric', got {self.engine!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if len(self.init_scales) != len(self.hidden_layer_sizes) + 1:
            raise ValueError("init_scales needs one (s_mu, s_sigma) pair per layer")

    def _initialize(self, X, y):
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        self.net_dims_ = (X.shape[1], *self.hidden_layer_sizes, len(self.classes_))
        self._rng = np.random.default_rng(self.random_state)
        self.coefs_ = [
            init_weights(n_in, n_out, s_mu, s_sigma, self._rng)
            for (n_in, n_out), (s_mu, s_sigma)
            in zip(zip(self.net_dims_[:-1], self.net_dims_[1:]), self.init_scales)]
        self.adam_ = AdamState(self.lr, self.beta1, self.beta2, self.adam_eps,
                               self.weight_decay, self.gamma, self.decoupled_wd)
        self.history_ = []
        self.epochs_done_ = 0
        self._reference = ReferenceEngine(self._layer_params(), self._loss_config())

    def _encode_labels(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        inside = np.minimum(idx, len(self.classes_) - 1)
        if np.any(self.classes_[inside] != y):
            raise ValueError("y contains labels not seen during fit")
        return idx

    # -- training ---------------------------------------------------------

    def _train_batches(self, X, yi, order):
        """One pass over ``order``; returns (mean loss, accuracy, ms/batch, guards, silent)."""
        fabric = None
        if self.engine == "fabric":
            fabric = Fabric(self.net_dims_, self.batch_size, self._layer_params(),
                            self._loss_config(), n_workers=self.n_workers,
                            trace=self.trace)
            fabric.scatter_weights(self.coefs_)
        total_loss, correct, guards, silent, n_batches = 0.0, 0, 0, 0, 0
        elapsed = 0.0
        try:
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                t0 = time.perf_counter()
                if fabric is not None:
                    results, _, self.adam_, self.coefs_ = fabric.train_batch(
                        X[idx], yi[idx], self.adam_, self.grad_reduction)
                else:
                    results, grads = self._reference.run_batch(
                        self.coefs_, X[idx], yi[idx], self.grad_reduction)
                    self.adam_, self.coefs_ = adam_step(self.adam_, grads, self.coefs_)
                elapsed += time.perf_counter() - t0
                n_batches += 1
                for r, label in zip(results, yi[idx]):
                    total_loss += r.loss
                    correct += r.prediction == label
                    guards += r.guards
                    silent += r.n_silent
        finally:
            if fabric is not None:
                fabric.close()
        n = max(len(order), 1)
        return total_loss / n, correct / n, 1000.0 * elapsed / max(n_batches, 1), guards, silent

    def fit(self, X, y, eval_set=None):
        """Train from scratch for ``epochs`` epochs.

        ``eval_set=(X_test, y_test)`` adds a test row to ``history_`` after
        every epoch.
        """
        self._validate_params()
        X, y = check_spike_data(X, y, self.n_steps)
        self._initialize(X, y)
        yi = self._encode_labels(y)
        if eval_set is not None:
            X_eval, y_eval = eval_set
            X_eval = check_spike_steps(X_eval, self.n_features_in_, self.n_steps)
        for _ in range(self.epochs):
            self._run_epoch(X, yi)
            if eval_set is not None:
                acc, loss, silent = self._evaluate(X_eval, self._encode_labels(np.asarray(y_eval)))
                self.history_.append(MetricsRow(self.epochs_done_, "test", loss, acc,
                                                0.0, 0, silent))
            if self.verbose:
                print(" ".join(f"{k}={v}" for k, v in vars(self.history_[-1]).items()))
        return self

    def _run_epoch(self, X, yi):
        order = self._rng.permutation(len(X)) if self.shuffle else np.arange(len(X))
        loss, acc, ms, guards, silent = self._train_batches(X, yi, order)
        self.epochs_done_ += 1
        self.history_.append(MetricsRow(self.epochs_done_, "train", loss, acc, ms, guards, silent))
        self.adam_ = epoch_decay(self.adam_)

    def partial_fit(self, X, y, classes=None):
        """Update on ``X`` in mini-batches without decaying the learning rate.

        The first call needs ``classes`` (or sees every class in ``y``).
        """
        self._validate_params()
        X, y = check_spike_data(X, y, self.n_steps,
                                getattr(self, "n_features_in_", None))
        if not hasattr(self, "coefs_"):
            classes = np.unique(y if classes is None else classes)
            self._initialize(X, classes)
        yi = self._encode_labels(y)
        self._train_batches(X, yi, np.arange(len(X)))
        return self

    # -- inference --------------------------------------------------------

    def first_spike_steps(self, X):
        """``(n, n_classes)`` first output spike steps, ``n_steps`` if silent."""
        check_is_fitted(self, "coefs_")
        X = check_spike_steps(X, self.n_features_in_, self.n_steps)
        out = np.full((len(X), len(self.classes_)), self.n_steps, dtype=np.int64)
        for b in range(len(X)):
            rasters, _, _ = self._reference.forward(self.coefs_, X[b])
            for k in range(out.shape[1]):
                hits = np.flatnonzero(rasters[-1][:, k])
                if hits.size:
                    out[b, k] = hits[0]
        return out

    def _predict_index(self, X):
        check_is_fitted(self, "coefs_")
        X = check_spike_steps(X, self.n_features_in_, self.n_steps)
        return np.array([self._reference.run_sample(self.coefs_, x, 0, backward=False).prediction
                         for x in X], dtype=np.int64)

    def predict(self, X):
        """Class of the first output neuron to fire; ``-1`` if none fires."""
        idx = self._predict_index(X)
        out = self.classes_[np.maximum(idx, 0)]
        out = out.astype(np.int64) if out.dtype.kind in "iub" else out.astype(object)
        out[idx == ABSTAIN] = -1
        return out

    def predict_proba(self, X):
        """Softmax over negative first-spike times, as in the loss."""
        times = self.first_spike_steps(X) * self.dt / self.tau_0
        z = -times - (-times).max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def _evaluate(self, X, yi):
        return self._reference.evaluate(self.coefs_, X, yi)

    def evaluate(self, X, y):
        """Return ``(accuracy, mean_loss)`` from forward passes only."""
        check_is_fitted(self, "coefs_")
        X = check_spike_steps(X, self.n_features_in_, self.n_steps)
        acc, loss, _ = self._evaluate(X, self._encode_labels(np.asarray(y)))
        return acc, loss
