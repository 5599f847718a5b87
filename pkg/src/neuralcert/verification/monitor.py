"""Runtime certificate monitor.

A deployed certificate can be watched instead of verified: if the observed
rate of change of W = V or h ever beats the rate the certificate promises,
the guarantee is void from that moment and the system should fail safe.
"""


class SafetyMonitor:
    """Streams (t_k, W_k) pairs and flags broken decrease conditions.

    Step k is flagged when (W_{k+1} - W_k) / dt > -rate(W_k) + tol. The
    first sample of a stream can never flag (there is nothing to compare
    against). `tripped` latches once any step has flagged; callers treat it
    as the fail-safe signal.
    """

    def __init__(self, rate, tol=1e-3):
        if tol < 0:
            raise ValueError("tolerance must be nonnegative")
        self.rate = rate
        self.tol = float(tol)
        self.reset()

    def reset(self):
        self._prev_t = None
        self._prev_w = None
        self.tripped = False

    def check(self, t, w):
        t = float(t)
        w = float(w)
        if self._prev_t is None:
            self._prev_t, self._prev_w = t, w
            return False
        dt = t - self._prev_t
        if dt <= 0:
            raise ValueError("timestamps must be strictly increasing")
        flag = (w - self._prev_w) / dt > -float(self.rate(self._prev_w)) + self.tol
        self._prev_t, self._prev_w = t, w
        if flag:
            self.tripped = True
        return flag


def clf_monitor(c=1.0, tol=1e-3):
    """Monitor for the Lyapunov decrease Vdot <= -c V."""
    return SafetyMonitor(lambda w: c * w, tol=tol)


def cbf_monitor(gamma=0.1, tol=1e-3):
    """Monitor for the barrier decrease hdot <= -gamma h."""
    return SafetyMonitor(lambda w: gamma * w, tol=tol)
