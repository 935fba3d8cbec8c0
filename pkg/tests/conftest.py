import copy

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_config() -> dict:
    """The quickstart config shrunk to a few seconds of work."""
    from stageprop.pipeline import QUICKSTART_CONFIG

    cfg = copy.deepcopy(QUICKSTART_CONFIG)
    cfg["seed"] = 3
    cfg["data"] = {
        "synth": dict(cfg["data"]["synth"], n_videos=20, frames_per_video=128, noise_sigma=0.1),
        "n_train": 14,
    }
    cfg["window_len"] = 64
    cfg["classifier"].update(layers=[[3, 16]], embed_dim=8, epochs=6, dropout=0.0)
    cfg["regressor"].update(hidden=16, epochs=5)
    cfg["eval"].update(an_values=[10, 50], max_an=50, recall_an=50)
    return cfg


_CRITERIA: dict[int, list[tuple[str, str, str]]] = {}


def numeric_grad(f, a: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``a`` (perturbed in place)."""
    g = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = a[i]
        a[i] = orig + h
        up = f()
        a[i] = orig - h
        down = f()
        a[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    _CRITERIA.setdefault(int(marker.args[0]), []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        rows = _CRITERIA[n]
        status = "PASS" if all(s == "PASS" for _, s, _ in rows) else "FAIL"
        details = " | ".join(f"{name}: {d}" if d else name for name, _, d in rows)
        terminalreporter.write_line(f"criterion {n}: {status}  ({details})")
