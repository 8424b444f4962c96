"""Binary cross-entropy on sigmoid outputs."""
import numpy as np

PROB_EPS = 1e-7


def cross_entropy(prediction, target, log_space=True):
    """Mean binary cross-entropy and its gradient w.r.t. ``prediction``.

    ``prediction`` holds log-probabilities when ``log_space`` is true, else
    probabilities in (0, 1). Probabilities are clamped to
    ``[PROB_EPS, 1 - PROB_EPS]``; the gradient is that of the loss formula
    evaluated at the clamped value.

    Returns ``(loss, grad)``.
    """
    prediction = np.asarray(prediction)
    target = np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("targets must be binary")
    t = target.astype(prediction.dtype)
    n = prediction.size
    if log_space:
        if (prediction > 0).any():
            raise ValueError("log-probabilities must be <= 0")
        logp = np.clip(prediction, np.log(PROB_EPS), np.log1p(-PROB_EPS))
        # log(1 - p) without cancellation near p -> 1
        log1mp = np.log(-np.expm1(logp))
        loss = -np.mean(t * logp + (1 - t) * log1mp)
        ratio = np.exp(logp - log1mp)  # p / (1 - p)
        grad = -(t - (1 - t) * ratio) / n
    else:
        if (prediction <= 0).any() or (prediction >= 1).any():
            raise ValueError("probabilities must lie in (0, 1)")
        p = np.clip(prediction, PROB_EPS, 1 - PROB_EPS)
        loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
        grad = (-(t / p) + (1 - t) / (1 - p)) / n
    return float(loss), grad.astype(prediction.dtype)
