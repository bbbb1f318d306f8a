import numpy as np
import pytest

from lgmsnet.model import ConfigError, ModelConfig
from lgmsnet.nn import AttentionSpec

TC_CHOICES = [(1, 0), (3, 1), (1, 1), (1, 3), (0, 1)]


def random_config(gen: np.random.Generator, input_channels=None) -> ModelConfig:
    """A random ModelConfig that passes validation."""
    while True:
        kernels = tuple(sorted(int(k) for k in gen.choice([1, 3, 5, 7, 9], size=4)))
        cfg = ModelConfig(
            stage_channels=tuple(int(4 * gen.integers(1, 7)) for _ in range(5)),
            lms_kernels=kernels,
            tc_ratio=TC_CHOICES[int(gen.integers(len(TC_CHOICES)))],
            patch_size=int(gen.choice([1, 2])),
            gms_expansion=int(gen.choice([1, 2])),
            attention=AttentionSpec(
                num_heads=int(gen.choice([1, 2, 4])), mlp_ratio=float(gen.choice([1.0, 2.0])), depth=int(gen.integers(1, 3))
            ),
            gms_stages=tuple(sorted(int(s) for s in gen.choice([3, 4, 5], size=int(gen.integers(0, 3)), replace=False))),
            input_channels=input_channels if input_channels is not None else int(gen.choice([1, 3])),
        )
        try:
            return cfg.validate()
        except ConfigError:
            continue


def naive_conv(x, w, b=None, groups=1):
    """Reference same-padded stride-1 convolution by explicit loops over taps."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    p = k // 2
    og = o // groups
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, o, h, wd))
    for oc in range(o):
        g = oc // og
        for ic in range(cg):
            for di in range(k):
                for dj in range(k):
                    out[:, oc] += w[oc, ic, di, dj] * xp[:, g * cg + ic, di : di + h, dj : dj + wd]
        if b is not None:
            out[:, oc] += b[oc]
    return out


@pytest.fixture
def tiny_cfg():
    return ModelConfig(stage_channels=(8, 8, 16, 16, 32), input_channels=1)


# acceptance criteria record (number, title, passed, seconds, note); printed
# as one line each at the end of the run
ACCEPTANCE_RESULTS: list[tuple[int, str, bool, float, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, secs, note in sorted(ACCEPTANCE_RESULTS):
        tail = f" | {note}" if note else ""
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s) {title}{tail}")
