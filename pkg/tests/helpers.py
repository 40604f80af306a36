"""Shared test utilities: finite-difference gradient oracle and op registry."""

from __future__ import annotations

import math

import numpy as np

from wstreid import datamodel, network, sampler, synthgen
from wstreid import diffcore as dc


def assert_grad_close(ad, num, rtol=1e-4, atol=1e-8, label=""):
    ad = np.asarray(ad, dtype=np.float64)
    num = np.asarray(num, dtype=np.float64)
    dev = np.abs(ad - num)
    bound = rtol * np.maximum(np.abs(ad), np.abs(num)) + atol
    if not (dev <= bound).all():
        worst = np.unravel_index(np.argmax(dev - bound), dev.shape)
        raise AssertionError(
            f"gradient mismatch {label} at {worst}: ad={ad[worst]} num={num[worst]}"
        )


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() wrt x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, arrays: dict[str, np.ndarray], h=1e-5, rtol=1e-4, atol=1e-8,
                label=""):
    """Compare backward gradients of build(**nodes) against central differences.

    ``build`` must construct the graph from scratch on every call so the
    finite-difference probe sees the perturbed leaf arrays.
    """
    nodes = {k: dc.Node(v) for k, v in arrays.items()}
    loss = build(**nodes)
    dc.backward(loss)

    def f():
        fresh = {k: dc.Node(v) for k, v in arrays.items()}
        return float(build(**fresh).value)

    for name, arr in arrays.items():
        num = numeric_grad(f, arr, h=h)
        ad = nodes[name].grad
        assert ad is not None, f"no gradient reached leaf {name} ({label})"
        assert_grad_close(ad, num, rtol=rtol, atol=atol, label=f"{label}:{name}")


def _away_from(x: np.ndarray, point: float, margin: float) -> np.ndarray:
    # Push values outside [point-margin, point+margin] so kinks stay inert
    # under the finite-difference step.
    shifted = x.copy()
    close = np.abs(shifted - point) < margin
    shifted[close] += 2.0 * margin
    return shifted


def op_cases(seed: int = 20240011):
    """(name, arrays, build) for every differentiable diffcore operation."""
    rng = np.random.default_rng(seed)

    def R(*shape):
        return rng.normal(size=shape)

    cases = []

    def weighted(out, w):
        return dc.sum_all(dc.mul(out, dc.Node(w)))

    w34, w53, w42, w63, w33, w24, w43 = (
        R(3, 4), R(5, 3), R(4, 2), R(6, 3), R(3, 3), R(2, 4), R(4, 3))
    w3, w4, w36, wbn = R(3), R(4), R(3, 6), R(8, 4)

    cases.append(("add", {"a": R(3, 4), "b": R(3, 4)},
                  lambda a, b: weighted(dc.add(a, b), w34)))
    cases.append(("sub", {"a": R(3, 4), "b": R(3, 4)},
                  lambda a, b: weighted(dc.sub(a, b), w34)))
    cases.append(("mul", {"a": R(3, 4), "b": R(3, 4)},
                  lambda a, b: weighted(dc.mul(a, b), w34)))
    cases.append(("scale", {"a": R(3, 4)},
                  lambda a: weighted(dc.scale(a, -1.7), w34)))
    cases.append(("add_bias", {"x": R(5, 3), "b": R(3)},
                  lambda x, b: weighted(dc.add_bias(x, b), w53)))
    cases.append(("matmul", {"a": R(4, 3), "b": R(3, 2)},
                  lambda a, b: weighted(dc.matmul(a, b), w42)))
    cases.append(("mean_rows", {"x": R(6, 3)},
                  lambda x: weighted(dc.mean_rows(x), w3)))
    cases.append(("rowwise_sum", {"x": R(4, 5)},
                  lambda x: weighted(dc.rowwise_sum(x), w4)))
    cases.append(("sum_all", {"x": R(3, 3)},
                  lambda x: dc.scale(dc.sum_all(x), 0.7)))
    cases.append(("mean_all", {"x": R(2, 5)},
                  lambda x: dc.scale(dc.mean_all(x), 1.3)))
    cases.append(("sqnorm", {"x": R(4, 2)},
                  lambda x: dc.sqnorm(x)))
    cases.append(("log", {"x": np.abs(R(3, 3)) + 0.5},
                  lambda x: weighted(dc.log(x), w33)))
    cases.append(("exp", {"x": R(3, 3)},
                  lambda x: weighted(dc.exp(x), w33)))
    cases.append(("relu", {"x": _away_from(R(3, 4), 0.0, 0.05)},
                  lambda x: weighted(dc.relu(x), w34)))
    cases.append(("clip_min", {"x": _away_from(R(3, 4), 0.25, 0.05)},
                  lambda x: weighted(dc.clip_min(x, 0.25), w34)))
    cases.append(("concat_rows", {"a": R(2, 3), "b": R(4, 3)},
                  lambda a, b: weighted(dc.concat_rows([a, b]), w63)))
    cases.append(("slice_rows", {"x": R(6, 4)},
                  lambda x: weighted(dc.slice_rows(x, 1, 3), w24)))
    cases.append(("take_rows", {"x": R(5, 3)},
                  lambda x: weighted(dc.take_rows(x, [0, 2, 2, 4]), w43)))
    cases.append(("pick", {"x": R(4, 5)},
                  lambda x: weighted(dc.pick(x, [1, 0, 3, 3]), w4)))
    cases.append(("softmax", {"x": R(3, 6)},
                  lambda x: weighted(dc.softmax(x), w36)))
    cases.append(("log_softmax", {"x": R(3, 6)},
                  lambda x: weighted(dc.log_softmax(x), w36)))

    bn_train = dc.BnState(4)
    bn_train.gamma.value = 1.0 + 0.3 * R(4)
    bn_train.beta.value = 0.2 * R(4)
    cases.append(("batchnorm_train", {"x": R(8, 4)},
                  lambda x: weighted(dc.batchnorm(x, bn_train, "train"), wbn)))

    bn_eval = dc.BnState(4)
    bn_eval.gamma.value = 1.0 + 0.3 * R(4)
    bn_eval.beta.value = 0.2 * R(4)
    bn_eval.running_mean = 0.5 * R(4)
    bn_eval.running_var = 1.0 + 0.4 * np.abs(R(4))
    cases.append(("batchnorm_eval", {"x": R(8, 4)},
                  lambda x: weighted(dc.batchnorm(x, bn_eval, "eval"), wbn)))

    return cases


# ---------------------------------------------------------------------------
# Toy model/batch fixtures and independent loss oracles


def toy_setup(num_extractors=2, num_cameras=3, persons=6, images=3, input_dim=5,
              feature_dim=6, hidden=(7,), views=2, pairs_per_view=2, seed=0):
    samples, _ = synthgen.generate(synthgen.SynthConfig(
        num_persons=persons, num_cameras=num_cameras,
        images_per_person_per_camera=images, input_dim=input_dim,
        sigma_id=0.5, sigma_cam=1.0, seed=seed))
    dataset = datamodel.build_wst(samples)
    batch = sampler.resolve_batch(
        dataset,
        sampler.BatchSampler(dataset, views_per_batch=views,
                             pairs_per_view=pairs_per_view, seed=seed).next_batch(),
    )
    config = network.ModelConfig(input_dim=input_dim, feature_dim=feature_dim,
                                 hidden_dims=hidden, num_extractors=num_extractors)
    model = network.MutualModel(config, dataset.class_counts, seed=seed)
    return model, dataset, batch


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_oracle(p, q, floor=1e-12) -> float:
    return math.fsum(
        max(pi, floor) * (math.log(max(pi, floor)) - math.log(max(qi, floor)))
        for pi, qi in zip(p, q)
    )


def js_oracle(p, q, floor=1e-12) -> float:
    return 0.5 * (kl_oracle(p, q, floor) + kl_oracle(q, p, floor))


def pair_js_table(model, batch, extractor) -> np.ndarray:
    """[num_branches, num_pairs] symmetrized-KL table via plain-float loops."""
    features = network.extract(model, extractor, batch.inputs, "train")
    rows = sorted({pos for pair in batch.pairs for pos in pair})
    local = {pos: i for i, pos in enumerate(rows)}
    routed = dc.take_rows(features, rows)
    table = np.zeros((model.num_cameras, len(batch.pairs)))
    for k, branch in enumerate(model.branches):
        probs = softmax_rows(branch.logits(routed, "train").value)
        for p_idx, (i, j) in enumerate(batch.pairs):
            table[k, p_idx] = js_oracle(probs[local[i]], probs[local[j]])
    return table
