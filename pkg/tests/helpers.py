import numpy as np

from lwdistill import tensor as T
from lwdistill.network import LayerSpec, ModelSpec, build_model
from lwdistill.tensor import Tape, Tensor


def make_spec(lines, input_shape, seed=0):
    return ModelSpec(tuple(LayerSpec.parse(s) for s in lines), tuple(input_shape), seed)


def make_model(lines, input_shape, seed=0):
    return build_model(make_spec(lines, input_shape, seed))


def rel_err(a, b) -> float:
    a = np.concatenate([np.ravel(x) for x in a]) if isinstance(a, list) else np.ravel(a)
    b = np.concatenate([np.ravel(x) for x in b]) if isinstance(b, list) else np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def set_params(model, arrays):
    for p, a in zip(model.parameters(), arrays):
        p.data = np.array(a, dtype=np.float64)


def param_arrays(model):
    return [p.data.copy() for p in model.parameters()]


def scalar_grad(fn, arrays):
    """Analytic gradient of ``fn(*tensors)`` (a scalar Tensor) at ``arrays``."""
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    return [g.data for g in tape.gradient(out, params)]


def scalar_value(fn, arrays) -> float:
    with T.no_grad():
        return float(fn(*[Tensor(a) for a in arrays]).data)


# criterion number -> (passed, one-line detail); filled by test_acceptance and
# printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
