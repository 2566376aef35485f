import numpy as np
import pytest

from brnet import losses
from brnet.nets import ArchitectureSpec, bp_forward, c_forward, init_params, param_shapes, rl_forward

SMALL_SPEC = ArchitectureSpec(input_hw=(8, 8))


def flat_params(params):
    """Parameter arrays in canonical order, plus a function rebuilding the sets."""
    shapes = param_shapes(params.spec)
    keys = [(s, n) for s in shapes for n in shapes[s]]
    arrays = [getattr(params, s)[n] for s, n in keys]

    def rebuild(tensors):
        out = {s: {} for s in shapes}
        for (s, n), t in zip(keys, tensors):
            out[s][n] = t
        return out

    return arrays, rebuild


def composite_loss(spec, images, labels, b, lam=1.0):
    """L_c - lam * L_bp through all three networks, as a function of every parameter."""
    def f(*tensors, rebuild):
        sets = rebuild(tensors)
        feats = rl_forward(images, sets["theta_rl"], spec)
        loss_c = losses.classification_loss(c_forward(feats, sets["theta_c"], spec), labels)
        adv = losses.adv_corr_loss(b, bp_forward(feats, sets["theta_bp"], spec))
        return losses.total_objective(losses.LossVariant("br_net", lam), loss_c, adv)[0]
    return f


def random_instance(seed, spec=SMALL_SPEC, batch=4):
    from brnet.autodiff import Tensor
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    for ps in (params.theta_rl, params.theta_c, params.theta_bp):
        for k in ps:
            ps[k] = ps[k] + 0.1 * rng.standard_normal(ps[k].shape)
    images = Tensor(rng.uniform(0, 3, size=(batch, 1, *spec.input_hw)))
    labels = np.arange(batch) % 2
    b = Tensor(rng.uniform(1, 6, size=(batch, 1)))
    return params, images, labels, b


def kink_margin(params, images):
    """Distance of an instance from the nearest max-pool tie or relu kink."""
    from brnet import autodiff as ad
    from brnet.autodiff import Tensor
    h, margin = images, np.inf
    for i in range(len(params.spec.channels)):
        c = ad.conv2x2(h, Tensor(params.theta_rl[f"conv{i}.w"]), Tensor(params.theta_rl[f"conv{i}.b"])).data
        b, ch, hh, ww = c.shape
        win = np.sort(c.reshape(b, ch, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, ch, hh // 2, ww // 2, 4))
        margin = min(margin, (win[..., -1] - win[..., -2]).min(), np.abs(win[..., -1]).min())
        h = Tensor(np.maximum(win[..., -1], 0.0))
    return margin


def smooth_instances(count, start, spec=SMALL_SPEC, margin=1e-4):
    """The first ``count`` random instances at least ``margin`` away from any kink."""
    seed = start
    while count:
        inst = random_instance(seed, spec)
        seed += 1
        if kink_margin(inst[0], inst[1]) >= margin:
            count -= 1
            yield inst


@pytest.fixture
def small_spec():
    return SMALL_SPEC


# one PASS/FAIL line per acceptance criterion, printed after the run
_CRITERIA: dict[int, tuple[str, str]] = {}


def _criterion_number(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return None
    return int(name.split("_")[2])


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    n = _criterion_number(report.nodeid)
    if n is None or (report.when != "call" and not report.failed):
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else str(report.longrepr)
    _CRITERIA[n] = ("PASS" if report.passed else "FAIL", detail.splitlines()[0] if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
