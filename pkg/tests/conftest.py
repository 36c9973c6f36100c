import numpy as np
import pytest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def loss_gradcheck(lam: float, seed: int = 0, batch: int = 16) -> float:
    """Max relative error between tape and finite-difference gradients of the
    QAIL loss on a 2-layer quantized policy, over every trainable parameter.

    Rounding is frozen at the evaluation point so the loss is smooth; LSQ
    step gradients are divided by their grad scale before comparing.
    """
    from ilq import tensor as T
    from ilq.imitation import QailConfig, quantize_policy, total_loss
    from ilq.policy import GaussianPolicy
    from ilq.quant import freeze_rounding, lsq_grad_scale

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        fp = GaussianPolicy([4, 12, 2], seed=seed, log_std_init=-0.4)
        obs = rng.normal(size=(batch, 4))
        act = rng.normal(size=(batch, 2))
        cfg = QailConfig(lam=lam, bits=4)
        q = quantize_policy(fp, cfg.weight_spec(), cfg.act_spec(), obs, cfg.input_spec())
        for qz in q.quantizers():
            # keep every value off the clip edges that min/max calibration puts them on
            qz.step.data = np.asarray(qz.step.data * 0.93)
        # move the student away from the teacher so QBC has a gradient
        for w in q.net.weights:
            w.data = w.data + 0.05 * rng.normal(size=w.shape)
        params = q.parameters()
        quantizers = q.quantizers()
        scales = {}
        n_in = [batch * d for d in q.net.dims[:-1]]
        for i, wq in enumerate(q.net.weight_quantizers):
            if wq is not None:
                scales[id(wq.step)] = lsq_grad_scale(q.net.weights[i].size, wq.spec)
        for i, aq in enumerate(q.net.act_quantizers):
            if aq is not None:
                scales[id(aq.step)] = lsq_grad_scale(n_in[i], aq.spec)
        with freeze_rounding(quantizers):
            loss, _ = total_loss(q, fp, (obs, act), cfg)
            loss.backward()
            worst = 0.0
            for p in params:
                fd = central_diff(lambda: total_loss(q, fp, (obs, act), cfg)[0].item(), p.data)
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                g = g / scales.get(id(p), 1.0)
                worst = max(worst, rel_err(g, fd, floor=1e-4))
    return worst


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
