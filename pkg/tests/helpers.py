"""Small builders shared by the test modules."""

from riskdrive.sim import ScenarioConfig, VehicleState, make_world

CFG3 = ScenarioConfig(lane_count=3, hdv_count=0)


def car(x, lane, v=20.0, cfg=CFG3, **kw):
    return VehicleState(x=float(x), y=cfg.lane_center(lane), v=float(v), lane=lane, **kw)


def world(av, *hdvs, cfg=CFG3):
    return make_world(cfg, [VehicleState(**{**av.__dict__, "is_av": True}), *hdvs])


def rel_error(a, b, floor=1e-6):
    import numpy as np

    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(loss, arrays, h=1e-5):
    """Central differences of ``loss()`` w.r.t. every entry of every array (edited in place)."""
    import numpy as np

    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            up = loss()
            arr.flat[i] = old - h
            down = loss()
            arr.flat[i] = old
            g.flat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


class KinkTrace:
    """Records ReLU masks and pooling argmaxes so a difference step can tell it crossed a kink."""

    def __init__(self):
        from riskdrive.nn import layers

        self.layers = layers
        self.trace = []

    def __enter__(self):
        L = self.layers
        self._saved = (L.relu, L.global_pool_forward, L.channel_pool_forward)
        relu, gpool, cpool = self._saved

        def traced_relu(x):
            self.trace.append(x > 0)
            return relu(x)

        def traced_pool(pool):
            def wrapper(f):
                out = pool(f)
                self.trace.append(out[-1][0])
                return out
            return wrapper

        L.relu, L.global_pool_forward, L.channel_pool_forward = traced_relu, traced_pool(gpool), traced_pool(cpool)
        return self

    def __exit__(self, *exc):
        L = self.layers
        L.relu, L.global_pool_forward, L.channel_pool_forward = self._saved

    def pattern(self, fn):
        self.trace = []
        value = fn()
        return value, [t.copy() for t in self.trace]


def kink_aware_difference(loss, arrays, h=1e-5, shrink=4.0, min_h=1e-9):
    """Central differences that shrink the step wherever the piecewise-linear pattern
    differs between theta+h and theta-h. Returns (grads, number of shrunk entries)."""
    import numpy as np

    grads, shrunk = {}, 0
    with KinkTrace() as tr:
        for name, arr in arrays.items():
            g = np.zeros_like(arr)
            for i in range(arr.size):
                old, step = arr.flat[i], h
                while True:
                    arr.flat[i] = old + step
                    up, pu = tr.pattern(loss)
                    arr.flat[i] = old - step
                    down, pd = tr.pattern(loss)
                    arr.flat[i] = old
                    same = len(pu) == len(pd) and all(np.array_equal(a, b) for a, b in zip(pu, pd))
                    if same or step / shrink < min_h:
                        break
                    step /= shrink
                shrunk += step != h
                g.flat[i] = (up - down) / (2 * step)
            grads[name] = g
    return grads, shrunk
