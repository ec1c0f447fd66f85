"""Multinomial logistic regression trained by full-batch gradient descent."""

from __future__ import annotations

import numpy as np

from ..errors import ContractViolationError


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logreg_loss_and_grad(w_flat, X, y, n_classes: int, l2: float):
    """Mean cross-entropy + (l2/2)*||W||^2, and its gradient.

    Weights are a flat vector packing W of shape (n_features + 1, n_classes);
    the last row is the bias, which is excluded from the penalty.
    """
    n, d = X.shape
    W = w_flat.reshape(d + 1, n_classes)
    Xb = np.hstack([X, np.ones((n, 1))])
    probs = softmax(Xb @ W)
    eps = 1e-12
    loss = -np.log(probs[np.arange(n), y] + eps).mean()
    loss += 0.5 * l2 * float((W[:-1] ** 2).sum())
    grad_z = probs.copy()
    grad_z[np.arange(n), y] -= 1.0
    grad = (Xb.T @ grad_z) / n
    grad[:-1] += l2 * W[:-1]
    return loss, grad.ravel()


class SoftmaxRegression:
    """Linear softmax classifier; deterministic given data and settings."""

    def __init__(self, l2: float = 1e-3, lr: float = 0.5, n_iter: int = 300,
                 tol: float = 1e-7):
        self.l2 = float(l2)
        self.lr = float(lr)
        self.n_iter = int(n_iter)
        self.tol = float(tol)
        self.W_ = None
        self.n_classes_ = 0
        self.loss_curve_ = []

    def fit(self, X, y, n_classes: int):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.shape[0] == 0:
            raise ContractViolationError("empty training set")
        n, d = X.shape
        w = np.zeros((d + 1) * n_classes, dtype=np.float64)
        self.loss_curve_ = []
        prev = np.inf
        for _ in range(self.n_iter):
            loss, grad = logreg_loss_and_grad(w, X, y, n_classes, self.l2)
            self.loss_curve_.append(loss)
            # Backtracking keeps the full-batch step stable without tuning lr
            # per dataset.
            step = self.lr
            for _ in range(20):
                w_new = w - step * grad
                new_loss, _ = logreg_loss_and_grad(w_new, X, y, n_classes, self.l2)
                if new_loss <= loss:
                    break
                step *= 0.5
            w = w_new
            if prev - new_loss < self.tol:
                break
            prev = new_loss
        self.W_ = w.reshape(d + 1, n_classes)
        self.n_classes_ = n_classes
        return self

    def predict_proba(self, X):
        X = np.asarray(X, dtype=np.float64)
        Xb = np.hstack([X, np.ones((X.shape[0], 1))])
        return softmax(Xb @ self.W_)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
