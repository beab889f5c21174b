"""Apply a transform plan to a trained network."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from pcnet.exceptions import DimensionError, PlanError
from pcnet.nn.layers import BatchNorm, Conv2D, Dense, PcaConv2D, PcaDense
from pcnet.nn.network import INPUT, Network, ParamCount
from pcnet.pca import CONV_SAMPLES, DENSE_SAMPLES, PcaBasis, effective_dim, fit_pca, truncate
from pcnet.tensor.eigen import sym_eigh
from pcnet.transform.ops import (
    OutputSelection,
    expanded_rows,
    input_transform_conv,
    input_transform_dense,
    prune_consumer,
    prune_producer,
    select_shared_outputs,
)
from pcnet.transform.plan import DimConfig, TransformPlan
from pcnet.transform.spaces import ChannelSpace, channel_spaces


@dataclass
class TransformResult:
    network: Network
    bases: dict[str, PcaBasis] = field(default_factory=dict)       # per input-transformed layer, truncated
    selections: dict[str, OutputSelection] = field(default_factory=dict)
    dims: dict[str, int] = field(default_factory=dict)            # m_e per layer in I
    kept: dict[str, int] = field(default_factory=dict)            # |S| per layer in O


def validate_plan(net: Network, plan: TransformPlan, spaces: list[ChannelSpace] | None = None) -> None:
    """Raise :class:`PlanError` unless ``plan`` can be applied to ``net``."""
    spaces = channel_spaces(net) if spaces is None else spaces
    names = set(net.layer_names)
    for name in plan.layers:
        if name not in names:
            raise PlanError(f"plan names unknown layer {name!r}")
        layer = net.layer(name)
        if not isinstance(layer, (Dense, Conv2D)):
            raise PlanError(f"layer {name!r} has no weights to transform")
        if isinstance(layer, (PcaDense, PcaConv2D)):
            raise PlanError(f"layer {name!r} is already transformed")
    last = net.output_layer.name
    if last in plan.outputs:
        raise PlanError(f"the final layer {last!r} defines the classes and cannot be output-transformed")
    inputs = plan.inputs
    for space in spaces:
        chosen = [p for p in space.producers if p in plan.outputs]
        if not chosen:
            continue
        if len(chosen) != len(space.producers):
            missing = sorted(set(space.producers) - set(chosen))
            raise PlanError(f"layers {space.producers} are summed together and must be output-transformed "
                            f"all or none; missing {missing}")
        configs = {plan.layers[p].output for p in chosen}
        if len(configs) > 1:
            raise PlanError(f"summed layers {chosen} need identical output configs")
        for c in space.consumers:
            if c.layer not in inputs:
                raise PlanError(f"if i is in O then i+1 must be in I: {chosen[0]!r} is output-transformed "
                                f"but its consumer {c.layer!r} is not input-transformed")
        if any(c.layer in chosen for c in space.consumers):
            raise PlanError(f"layer feeds its own channel space: {chosen}")


def touched_layers(net: Network, plan: TransformPlan) -> set[str]:
    """Layers whose tensors a plan rewrites: its own layers plus batch norms in pruned spaces."""
    touched = set(plan.inputs | plan.outputs)
    for space in channel_spaces(net):
        if any(p in plan.outputs for p in space.producers):
            touched.update(space.batchnorms)
    return touched


# -- activation sampling ----------------------------------------------------

def collect_samples(net: Network, data: np.ndarray, tensors: list[str], max_samples: int = DENSE_SAMPLES,
                    max_vectors: int = CONV_SAMPLES, seed: int = 0, batch_size: int = 250) -> dict[str, np.ndarray]:
    """PCA sample matrices for the named tensors, streamed batch by batch.

    The first ``max_samples`` inputs of ``data`` are run through the network
    in inference mode. Image tensors contribute per-pixel depth vectors,
    subsampled uniformly (seeded) to about ``max_vectors`` rows.
    """
    data = np.asarray(data)[:max_samples]
    n = len(data)
    if n < 2:
        raise DimensionError(f"need at least 2 samples for PCA, got {n}")
    rng = np.random.default_rng(seed)
    frac, taken, seen, parts = {}, {}, {}, {}
    for t in tensors:
        shape = net.shapes[t]
        rows = n * int(np.prod(shape[:-1])) if len(shape) == 3 else n
        frac[t] = min(1.0, max_vectors / rows) if len(shape) == 3 else 1.0
        taken[t], seen[t], parts[t] = 0, 0, []
    for start in range(0, n, batch_size):
        batch = np.asarray(data[start:start + batch_size], dtype=net.dtype)
        outputs = net.forward(batch, training=False, keep=False).outputs if tensors != [INPUT] else {INPUT: batch}
        for t in tensors:
            act = outputs[t]
            act = act.reshape(-1, act.shape[-1]) if act.ndim == 4 else act.reshape(len(act), -1)
            if frac[t] < 1.0:
                seen[t] += len(act)
                want = int(np.floor(frac[t] * seen[t])) - taken[t]
                idx = np.sort(rng.choice(len(act), size=min(want, len(act)), replace=False))
                act = act[idx]
            taken[t] += len(act)
            parts[t].append(np.asarray(act, dtype=np.float64))
    return {t: np.concatenate(p) for t, p in parts.items()}


def effective_dims(net: Network, data: np.ndarray, layers: list[str], threshold: float,
                   max_samples: int = DENSE_SAMPLES, max_vectors: int = CONV_SAMPLES,
                   seed: int = 0) -> dict[str, int]:
    """Effective dimensionality of each named layer's input at ``threshold``.

    Only eigenvalues are computed, via the Gram matrix when there are fewer
    samples than dimensions.
    """
    tensors = {name: net.layer(name).inputs[0] for name in layers}
    samples = collect_samples(net, data, sorted(set(tensors.values())), max_samples, max_vectors, seed)
    spectra = {t: sample_variances(x) for t, x in samples.items()}
    return {name: effective_dim(spectra[t], threshold) for name, t in tensors.items()}


def sample_variances(x: np.ndarray) -> np.ndarray:
    """Covariance eigenvalues (descending, zero-padded to the feature count)."""
    n, m = x.shape
    xc = x - x.mean(axis=0)
    gram = xc.T @ xc if n >= m else xc @ xc.T
    lam = sym_eigh(gram / (n - 1), eigvals_only=True).eigenvalues
    out = np.zeros(m)
    out[: min(m, lam.size)] = lam[:m]
    return out


# -- plan application -------------------------------------------------------

def _truncate(name: str, basis: PcaBasis, cfg: DimConfig) -> PcaBasis:
    try:
        if cfg.count is not None:
            return truncate(basis, n_components=cfg.count)
        return truncate(basis, threshold=cfg.threshold)
    except DimensionError as exc:
        raise PlanError(f"layer {name!r}: {exc}") from None


def apply_plan(net: Network, plan: TransformPlan, data: np.ndarray | None = None, *,
               samples: dict[str, np.ndarray] | None = None, max_samples: int = DENSE_SAMPLES,
               max_vectors: int = CONV_SAMPLES, seed: int = 0) -> TransformResult:
    """Return a transformed copy of ``net``.

    PCA statistics for every input-transformed layer come from the original
    network in a single pass over ``data`` (or from precomputed ``samples``
    keyed by tensor name). Output transformations are applied first, pruning
    the consumers' truncated bases, then every layer in the plan's input set
    is rewritten to its PCA form.
    """
    spaces = channel_spaces(net)
    validate_plan(net, plan, spaces)
    work = copy.deepcopy(net)
    dtype = net.dtype

    tensors = sorted({net.layer(name).inputs[0] for name in plan.inputs})
    if samples is None and tensors:
        if data is None:
            raise PlanError("input transformations need data (or precomputed samples) for PCA")
        samples = collect_samples(net, data, tensors, max_samples, max_vectors, seed)
    fits = {t: fit_pca(samples[t]) for t in tensors}

    state: dict[str, dict] = {}
    result = TransformResult(work)
    for name in sorted(plan.inputs | plan.outputs):
        layer = work.layer(name)
        state[name] = {"W": np.asarray(layer.params["W"], dtype=np.float64),
                       "b": None if "b" not in layer.params else np.asarray(layer.params["b"], np.float64)}
    for name in plan.inputs:
        basis = _truncate(name, fits[net.layer(name).inputs[0]], plan.layers[name].input)
        state[name]["mean"], state[name]["U"] = basis.mean, basis.U
        result.bases[name] = basis
        result.dims[name] = basis.U.shape[1]

    for space in spaces:
        chosen = [p for p in space.producers if p in plan.outputs]
        if not chosen:
            continue
        cfg = plan.layers[chosen[0]].output
        seen, bases, expands = set(), [], []
        for c in space.consumers:
            key = (c.tensor, result.dims[c.layer])
            if key in seen:
                continue
            seen.add(key)
            bases.append(state[c.layer]["U"])
            expands.append(c.expand)
        if len({U.shape[0] // e for U, e in zip(bases, expands)}) > 1:
            raise PlanError(f"consumers of {chosen} disagree on the channel count")
        try:
            sel = select_shared_outputs(bases, cfg.count, cfg.threshold, expands)
        except DimensionError as exc:
            raise PlanError(f"layers {chosen}: {exc}") from None
        keep = sel.indices
        for p in chosen:
            state[p]["W"], state[p]["b"] = prune_producer(state[p]["W"], state[p]["b"], keep)
            result.selections[p] = sel
            result.kept[p] = keep.size
        for bn_name in space.batchnorms:
            bn = work.layer(bn_name)
            for store in (bn.params, bn.buffers):
                for k in store:
                    store[k] = store[k][keep].copy()
        for c in space.consumers:
            rows = expanded_rows(keep, space.channels, c.expand)
            st = state[c.layer]
            st["mean"], st["U"] = st["mean"][rows].copy(), st["U"][rows].copy()
            st["W"] = prune_consumer(st["W"], rows)

    for name in plan.inputs | plan.outputs:
        old = work.layer(name)
        st = state[name]
        if name in plan.inputs:
            if isinstance(old, Conv2D):
                W, b, _ = input_transform_conv(st["W"], st["b"], st["mean"], st["U"])
                new = PcaConv2D(name, st["mean"], st["U"], W, b, stride=old.stride, padding=old.padding,
                                activation=old.activation)
            else:
                W, b = input_transform_dense(st["W"], st["b"], st["mean"], st["U"])
                new = PcaDense(name, st["mean"], st["U"], W, b, activation=old.activation)
        else:
            new = copy.copy(old)
            new.params = {"W": st["W"]}
            if st["b"] is not None:
                new.params["b"] = st["b"]
            new.buffers = {}
        work.replace(name, new)
    work.astype(dtype)
    work.shapes = work.infer_shapes()
    return result


def planned_param_count(net: Network, plan: TransformPlan, dims: dict[str, int] | None = None,
                        kept: dict[str, int] | None = None) -> ParamCount:
    """Parameter counts of the transformed network, from shapes alone.

    Threshold configs are data-dependent; their resolved values must be
    passed in ``dims`` (m_e per layer) and ``kept`` (|S| per layer), e.g.
    from a :class:`TransformResult`.
    """
    spaces = channel_spaces(net)
    validate_plan(net, plan, spaces)
    dims, kept = dict(dims or {}), dict(kept or {})
    for name, lp in plan.layers.items():
        for cfg, table in ((lp.input, dims), (lp.output, kept)):
            if cfg is not None and name not in table:
                if cfg.count is None:
                    raise PlanError(f"layer {name!r} uses a threshold; pass its resolved size")
                table[name] = cfg.count

    width = {}          # layer -> channels it reads after pruning
    bn_width = {}
    out_width = {}
    for space in spaces:
        chosen = [p for p in space.producers if p in kept]
        channels = kept[chosen[0]] if chosen else space.channels
        for p in space.producers:
            out_width[p] = channels
        for bn in space.batchnorms:
            bn_width[bn] = channels
        for c in space.consumers:
            width[c.layer] = channels * c.expand

    trainable = frozen = 0
    for layer in net.layers:
        name = layer.name
        if isinstance(layer, BatchNorm):
            trainable += 2 * bn_width[name]
            frozen += 2 * bn_width[name]
            continue
        if not isinstance(layer, (Dense, Conv2D)):
            continue
        spatial = int(np.prod(layer.params["W"].shape[:2])) if isinstance(layer, Conv2D) else 1
        n_out = out_width[name]
        if name in dims:
            m_e = dims[name]
            if m_e > width[name]:
                raise PlanError(f"layer {name!r}: cannot keep {m_e} of {width[name]} input directions")
            trainable += spatial * m_e * n_out + n_out
            frozen += width[name] * m_e + width[name]
        else:
            trainable += layer.params["W"].size // (layer.params["W"].shape[-1]) * n_out
            trainable += n_out if "b" in layer.params else 0
            frozen += sum(v.size for v in layer.buffers.values())
    return ParamCount(int(trainable), int(trainable + frozen))
