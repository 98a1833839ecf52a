"""Attention MIL aggregators with hand-written backward passes.

Four models share one interface:

* ``Abmil``  - gated attention pooling over embedded instances.
* ``ClamSb`` - ``Abmil`` plus an instance head trained on the top/bottom
  attended instances.
* ``Dsmil``  - max-instance stream plus attention by query similarity to the
  critical instance.
* ``Dtfd``   - two-tier model: gated attention per pseudo-bag, then gated
  attention over the pseudo-bags' attention-pooled features.

``loss_and_grad`` returns the scalar loss, a :class:`ParamSet` of gradients
with the model's layout, and the :class:`AggOutput` of the forward pass.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import (DimensionError, ParamSet, Rng, cross_entropy_grad, init_uniform,
                        softmax)

ARCH_TAGS = {"abmil": 0, "clam-sb": 1, "dsmil": 2, "dtfd": 3}
CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class AggOutput:
    logits: np.ndarray
    attention: np.ndarray
    aux: dict = field(default_factory=dict)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _linear(P: ParamSet, name: str, X: np.ndarray) -> np.ndarray:
    return X @ P[name + ".W"].T + P[name + ".b"][0]


def _linear_shapes(name: str, n_in: int, n_out: int) -> dict:
    return {name + ".W": (n_out, n_in), name + ".b": (1, n_out)}


def _gated_shapes(pre: str, d: int, hidden: int, attn: int, n_out: int) -> dict:
    # embed and head are affine; the attention maps V, U, w carry no bias
    shapes = {}
    shapes.update(_linear_shapes(pre + "embed", d, hidden))
    shapes[pre + "attn_V.W"] = (attn, hidden)
    shapes[pre + "attn_U.W"] = (attn, hidden)
    shapes[pre + "attn_w.W"] = (1, attn)
    shapes.update(_linear_shapes(pre + "head", hidden, n_out))
    return shapes


def _gated_forward(P: ParamSet, pre: str, X: np.ndarray) -> dict:
    Z = _linear(P, pre + "embed", X)
    H = np.maximum(Z, 0.0)
    At = np.tanh(H @ P[pre + "attn_V.W"].T)
    As = _sigmoid(H @ P[pre + "attn_U.W"].T)
    Gm = At * As
    scores = Gm @ P[pre + "attn_w.W"][0]
    a = softmax(scores)
    M = a @ H
    logits = _linear(P, pre + "head", M[None, :])[0]
    return dict(X=X, Z=Z, H=H, At=At, As=As, Gm=Gm, scores=scores, a=a, M=M, logits=logits)


def _gated_backward(P: ParamSet, G: ParamSet, pre: str, c: dict, dlogits: np.ndarray,
                    dM_extra: np.ndarray | None = None, dH_extra: np.ndarray | None = None,
                    need_dX: bool = False) -> np.ndarray | None:
    """Accumulate gradients of one gated-attention pass into ``G``."""
    H, a, M = c["H"], c["a"], c["M"]
    G[pre + "head.W"] += np.outer(dlogits, M)
    G[pre + "head.b"][0] += dlogits
    dM = P[pre + "head.W"].T @ dlogits
    if dM_extra is not None:
        dM = dM + dM_extra
    dH = np.outer(a, dM)
    if dH_extra is not None:
        dH += dH_extra
    da = H @ dM
    ds = a * (da - a @ da)
    G[pre + "attn_w.W"] += ds[None, :] @ c["Gm"]
    dGm = np.outer(ds, P[pre + "attn_w.W"][0])
    At, As = c["At"], c["As"]
    d_pre_v = dGm * As * (1.0 - At * At)
    d_pre_u = dGm * At * As * (1.0 - As)
    G[pre + "attn_V.W"] += d_pre_v.T @ H
    G[pre + "attn_U.W"] += d_pre_u.T @ H
    dH += d_pre_v @ P[pre + "attn_V.W"] + d_pre_u @ P[pre + "attn_U.W"]
    dZ = dH * (c["Z"] > 0.0)
    G[pre + "embed.W"] += dZ.T @ c["X"]
    G[pre + "embed.b"][0] += dZ.sum(axis=0)
    if need_dX:
        return dZ @ P[pre + "embed.W"]
    return None


class MilModel:
    """Base class: parameter layout, initialisation and head bookkeeping."""

    arch = ""
    head_prefixes: tuple[str, ...] = ()

    def __init__(self, d: int, n_classes: int, seed: int = 0, **hyper):
        if n_classes < 2:
            raise DimensionError("need at least two classes")
        self.d = int(d)
        self.n_classes = int(n_classes)
        self.hyper = self.default_hyper()
        unknown = set(hyper) - set(self.hyper)
        if unknown:
            raise TypeError(f"{self.arch}: unknown hyperparameters {sorted(unknown)}")
        self.hyper.update(hyper)
        self.validate_hyper()
        self.params = ParamSet(self.layout(self.n_classes))
        init_uniform(self.params, Rng(seed))

    @classmethod
    def default_hyper(cls) -> dict:
        return {}

    def validate_hyper(self) -> None:
        pass

    def layout(self, n_classes: int) -> dict:
        raise NotImplementedError

    @property
    def tag(self) -> int:
        return ARCH_TAGS[self.arch]

    def head_blocks(self) -> list[str]:
        return [n for n in self.params.names() if n.rsplit(".", 1)[0] in self.head_prefixes]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] != self.d:
            raise DimensionError(f"{self.arch}: expected a (p>=1, {self.d}) bag, got {X.shape}")
        return X

    def forward(self, X: np.ndarray, rng: Rng | None = None) -> AggOutput:
        raise NotImplementedError

    def loss_and_grad(self, X: np.ndarray, label: int, rng: Rng | None = None):
        raise NotImplementedError

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.forward(X).logits)

    def with_params(self, flat: np.ndarray) -> "MilModel":
        """Shallow clone sharing everything except the parameter vector."""
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = self.params.with_flat(flat)
        return clone

    def copy(self) -> "MilModel":
        return self.with_params(self.params.flat.copy())

    def reset_heads(self, n_classes: int, seed: int = 0) -> "MilModel":
        """New model with head blocks re-initialised for ``n_classes``.

        Every other block is copied bit for bit.
        """
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.hyper = dict(self.hyper)
        clone.n_classes = int(n_classes)
        clone.params = ParamSet(clone.layout(n_classes))
        heads = clone.head_blocks()
        for name in clone.params.names():
            if name not in heads:
                clone.params[name][...] = self.params[name]
        init_uniform(clone.params, Rng(seed), heads)
        return clone


class Abmil(MilModel):
    arch = "abmil"
    head_prefixes = ("head",)

    @classmethod
    def default_hyper(cls) -> dict:
        return {"hidden": 512, "attn": 256}

    def layout(self, n_classes: int) -> dict:
        return _gated_shapes("", self.d, self.hyper["hidden"], self.hyper["attn"], n_classes)

    def forward(self, X, rng=None) -> AggOutput:
        c = _gated_forward(self.params, "", self._check(X))
        return AggOutput(logits=c["logits"], attention=c["a"], aux={"cache": c})

    def loss_and_grad(self, X, label, rng=None):
        out = self.forward(X)
        loss, dlogits = cross_entropy_grad(out.logits, label)
        grads = self.params.zeros_like()
        _gated_backward(self.params, grads, "", out.aux["cache"], dlogits)
        return loss, grads, out


class ClamSb(Abmil):
    arch = "clam-sb"
    head_prefixes = ("head", "inst")

    @classmethod
    def default_hyper(cls) -> dict:
        return {"hidden": 512, "attn": 256, "k_sample": 8, "bag_weight": 0.7, "inst_weight": 0.3}

    def validate_hyper(self) -> None:
        if abs(self.hyper["bag_weight"] + self.hyper["inst_weight"] - 1.0) > 1e-12:
            raise ValueError("bag_weight + inst_weight must equal 1")
        if self.hyper["k_sample"] < 1:
            raise ValueError("k_sample must be >= 1")

    def layout(self, n_classes: int) -> dict:
        shapes = super().layout(n_classes)
        shapes.update(_linear_shapes("inst", self.hyper["hidden"], 2))
        return shapes

    def effective_k(self, p: int) -> int:
        k = int(self.hyper["k_sample"])
        return k if k <= p else max(1, p // 2)

    def instance_selection(self, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices and pseudo-labels: top-k attended -> 1, bottom-k -> 0."""
        p = a.shape[0]
        if p == 1:
            return np.array([0]), np.array([1])
        k = self.effective_k(p)
        top = np.argsort(-a, kind="stable")[:k]
        bottom = np.argsort(a, kind="stable")[:k]
        idx = np.concatenate([top, bottom])
        targets = np.concatenate([np.ones(k, dtype=int), np.zeros(k, dtype=int)])
        return idx, targets

    def loss_and_grad(self, X, label, rng=None):
        out = self.forward(X)
        c = out.aux["cache"]
        wb, wi = self.hyper["bag_weight"], self.hyper["inst_weight"]
        bag_loss, dlogits = cross_entropy_grad(out.logits, label)

        idx, targets = self.instance_selection(c["a"])
        inst_logits = _linear(self.params, "inst", c["H"][idx])
        inst_losses, d_inst = [], np.empty_like(inst_logits)
        for r, t in enumerate(targets):
            l_r, d_inst[r] = cross_entropy_grad(inst_logits[r], int(t))
            inst_losses.append(l_r)
        inst_loss = float(np.mean(inst_losses))
        d_inst *= wi / len(targets)

        grads = self.params.zeros_like()
        grads["inst.W"] += d_inst.T @ c["H"][idx]
        grads["inst.b"][0] += d_inst.sum(axis=0)
        dH_extra = np.zeros_like(c["H"])
        np.add.at(dH_extra, idx, d_inst @ self.params["inst.W"])
        _gated_backward(self.params, grads, "", c, wb * dlogits, dH_extra=dH_extra)

        out.aux.update(bag_loss=bag_loss, inst_loss=inst_loss, inst_idx=idx)
        return wb * bag_loss + wi * inst_loss, grads, out


class Dsmil(MilModel):
    arch = "dsmil"
    head_prefixes = ("inst_cls", "bag_head")

    @classmethod
    def default_hyper(cls) -> dict:
        return {"hidden": 512, "query": 128}

    def layout(self, n_classes: int) -> dict:
        shapes = {}
        shapes.update(_linear_shapes("inst_cls", self.d, n_classes))
        shapes.update(_linear_shapes("query", self.d, self.hyper["query"]))
        shapes.update(_linear_shapes("value", self.d, self.hyper["hidden"]))
        shapes.update(_linear_shapes("bag_head", self.hyper["hidden"], n_classes))
        return shapes

    def forward(self, X, rng=None, critical: int | None = None) -> AggOutput:
        X = self._check(X)
        P = self.params
        C = _linear(P, "inst_cls", X)
        if critical is None:
            critical = int(np.argmax(C.max(axis=1)))
        Q = _linear(P, "query", X)
        V = _linear(P, "value", X)
        scale = 1.0 / np.sqrt(Q.shape[1])
        a = softmax((Q @ Q[critical]) * scale)
        bag_feat = a @ V
        bag_logits = _linear(P, "bag_head", bag_feat[None, :])[0]
        logits = 0.5 * (C[critical] + bag_logits)
        cache = dict(X=X, C=C, Q=Q, V=V, a=a, bag_feat=bag_feat, scale=scale)
        return AggOutput(logits=logits, attention=a,
                         aux={"cache": cache, "critical": critical,
                              "instance_logits": C, "bag_logits": bag_logits})

    def loss_and_grad(self, X, label, rng=None, critical: int | None = None):
        """Loss with the critical instance held fixed (no gradient through argmax)."""
        out = self.forward(X, critical=critical)
        c, i_star = out.aux["cache"], out.aux["critical"]
        P = self.params
        loss, dfinal = cross_entropy_grad(out.logits, label)
        grads = P.zeros_like()

        d_bag_logits = 0.5 * dfinal
        grads["bag_head.W"] += np.outer(d_bag_logits, c["bag_feat"])
        grads["bag_head.b"][0] += d_bag_logits
        d_bag_feat = P["bag_head.W"].T @ d_bag_logits
        a, Q, V, scale = c["a"], c["Q"], c["V"], c["scale"]
        dV = np.outer(a, d_bag_feat)
        da = V @ d_bag_feat
        ds = a * (da - a @ da)
        dQ = np.outer(ds, Q[i_star]) * scale
        dQ[i_star] += (ds @ Q) * scale

        X = c["X"]
        grads["value.W"] += dV.T @ X
        grads["value.b"][0] += dV.sum(axis=0)
        grads["query.W"] += dQ.T @ X
        grads["query.b"][0] += dQ.sum(axis=0)
        grads["inst_cls.W"] += np.outer(0.5 * dfinal, X[i_star])
        grads["inst_cls.b"][0] += 0.5 * dfinal
        return loss, grads, out


def pseudo_bag_split(p: int, m: int, rng: Rng) -> list[np.ndarray]:
    """Shuffle ``range(p)`` and cut it into ``min(m, p)`` near-equal chunks."""
    m = min(int(m), p)
    if m < 1:
        raise ValueError("need at least one pseudo-bag")
    perm = rng.permutation(p)
    base, extra = divmod(p, m)
    groups, start = [], 0
    for j in range(m):
        size = base + (1 if j < extra else 0)
        groups.append(perm[start:start + size])
        start += size
    return groups


class Dtfd(MilModel):
    arch = "dtfd"
    head_prefixes = ("t1.head", "t2.head")

    @classmethod
    def default_hyper(cls) -> dict:
        return {"hidden": 512, "attn": 256, "m_pseudo": 5, "eval_seed": 0}

    def validate_hyper(self) -> None:
        if self.hyper["m_pseudo"] < 1:
            raise ValueError("m_pseudo must be >= 1")

    def layout(self, n_classes: int) -> dict:
        h, a = self.hyper["hidden"], self.hyper["attn"]
        shapes = _gated_shapes("t1.", self.d, h, a, n_classes)
        shapes.update(_gated_shapes("t2.", h, h, a, n_classes))
        return shapes

    def forward(self, X, rng: Rng | None = None, groups: list[np.ndarray] | None = None) -> AggOutput:
        """Without ``rng`` or ``groups`` the split uses ``Rng(eval_seed)``."""
        X = self._check(X)
        if groups is None:
            rng = rng if rng is not None else Rng(self.hyper["eval_seed"])
            groups = pseudo_bag_split(X.shape[0], self.hyper["m_pseudo"], rng)
        tier1 = [_gated_forward(self.params, "t1.", X[g]) for g in groups]
        distilled = np.stack([c["M"] for c in tier1])
        tier2 = _gated_forward(self.params, "t2.", distilled)
        attention = np.zeros(X.shape[0])
        for j, (g, c) in enumerate(zip(groups, tier1)):
            attention[g] = c["a"] * tier2["a"][j]
        attention /= attention.sum()
        return AggOutput(logits=tier2["logits"], attention=attention,
                         aux={"groups": groups, "tier1": tier1, "tier2": tier2,
                              "pseudo_logits": np.stack([c["logits"] for c in tier1])})

    def loss_and_grad(self, X, label, rng: Rng | None = None, groups=None):
        out = self.forward(X, rng=rng, groups=groups)
        tier1, tier2 = out.aux["tier1"], out.aux["tier2"]
        m = len(tier1)
        grads = self.params.zeros_like()
        t2_loss, d2 = cross_entropy_grad(tier2["logits"], label)
        d_distilled = _gated_backward(self.params, grads, "t2.", tier2, d2, need_dX=True)
        t1_losses = []
        for j, c in enumerate(tier1):
            l_j, d1 = cross_entropy_grad(c["logits"], label)
            t1_losses.append(l_j)
            _gated_backward(self.params, grads, "t1.", c, d1 / m, dM_extra=d_distilled[j])
        out.aux.update(tier1_losses=t1_losses, tier2_loss=t2_loss)
        return float(np.mean(t1_losses)) + t2_loss, grads, out


MODELS = {cls.arch: cls for cls in (Abmil, ClamSb, Dsmil, Dtfd)}


def build_model(arch: str, d: int, n_classes: int, seed: int = 0, **hyper) -> MilModel:
    try:
        cls = MODELS[arch]
    except KeyError:
        raise ValueError(f"unknown aggregator {arch!r}; choose from {sorted(MODELS)}") from None
    return cls(d, n_classes, seed=seed, **hyper)


def abmil_forward(X: np.ndarray, model: Abmil) -> AggOutput:
    return model.forward(X)


def clam_sb_loss(X: np.ndarray, label: int, model: ClamSb):
    return model.loss_and_grad(X, label)


def dsmil_forward(X: np.ndarray, model: Dsmil, label: int | None = None):
    if label is None:
        return model.forward(X)
    loss, grads, out = model.loss_and_grad(X, label)
    return out, loss, grads


def dtfd_forward(X: np.ndarray, label: int, model: Dtfd, rng: Rng):
    loss, grads, out = model.loss_and_grad(X, label, rng=rng)
    return out.aux["tier1_losses"], out.aux["tier2_loss"], grads, out


# checkpoint blocks named "hyper.<key>" hold constructor hyperparameters as 1x1 values
_CKPT_HEADER = struct.Struct("<4sIBII")
_BLOCK_HEAD = struct.Struct("<H")
_BLOCK_SHAPE = struct.Struct("<II")


def _blocks_bytes(blocks: list[tuple[str, np.ndarray]]) -> bytes:
    parts = []
    for name, arr in blocks:
        raw = name.encode("utf-8")
        parts.append(_BLOCK_HEAD.pack(len(raw)) + raw + _BLOCK_SHAPE.pack(*arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_bytes(model: MilModel) -> bytes:
    header = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.tag,
                               model.n_classes, model.d)
    blocks = [(f"hyper.{k}", np.array([[float(v)]])) for k, v in sorted(model.hyper.items())]
    blocks += list(model.params.items())
    return header + _blocks_bytes(blocks)


def save_checkpoint(model: MilModel, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> MilModel:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} (at byte offset 0)")
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"truncated header (at byte offset {len(data)})")
    _, version, tag, n_classes, d = _CKPT_HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version} (at byte offset 4)")
    archs = {v: k for k, v in ARCH_TAGS.items()}
    if tag not in archs:
        raise CheckpointError(f"unknown architecture tag {tag} (at byte offset 8)")
    offset = _CKPT_HEADER.size
    blocks: dict[str, np.ndarray] = {}
    while offset < len(data):
        start = offset
        if offset + _BLOCK_HEAD.size > len(data):
            raise CheckpointError(f"truncated block header (at byte offset {start})")
        (name_len,) = _BLOCK_HEAD.unpack_from(data, offset)
        offset += _BLOCK_HEAD.size
        if offset + name_len + _BLOCK_SHAPE.size > len(data):
            raise CheckpointError(f"truncated block header (at byte offset {start})")
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = _BLOCK_SHAPE.unpack_from(data, offset)
        offset += _BLOCK_SHAPE.size
        nbytes = 8 * rows * cols
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated block {name!r} (at byte offset {len(data)})")
        blocks[name] = np.frombuffer(data, dtype="<f8", count=rows * cols,
                                     offset=offset).reshape(rows, cols)
        offset += nbytes
    cls = MODELS[archs[tag]]
    defaults = cls.default_hyper()
    hyper = {}
    for key, default in defaults.items():
        block = blocks.pop(f"hyper.{key}", None)
        if block is not None:
            hyper[key] = type(default)(block[0, 0])
    model = cls(d, n_classes, **hyper)
    if set(blocks) != set(model.params.names()):
        raise CheckpointError(f"parameter blocks do not match the {cls.arch} layout")
    for name, arr in blocks.items():
        if arr.shape != model.params[name].shape:
            raise CheckpointError(f"block {name!r} has shape {arr.shape}, "
                                  f"expected {model.params[name].shape}")
        model.params[name][...] = arr
    return model


def load_checkpoint(path: str | Path) -> MilModel:
    return parse_checkpoint(Path(path).read_bytes())


# small layouts keep a full central-difference sweep cheap
GRADCHECK_SETUPS = {
    "abmil": dict(p=5, hyper=dict(hidden=8, attn=5)),
    "clam-sb": dict(p=6, hyper=dict(hidden=8, attn=5, k_sample=2)),
    "dsmil": dict(p=5, hyper=dict(hidden=8, query=4)),
    "dtfd": dict(p=10, hyper=dict(hidden=8, attn=5, m_pseudo=3)),
}


@dataclass
class GradcheckResult:
    arch: str
    max_rel_err: float
    # worst |analytic - numeric| relative to the largest gradient entry
    max_scaled_err: float
    n_points: int


def gradcheck_point(arch: str, seed: int, d: int = 6, n_classes: int = 3,
                    eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Analytic and numeric gradients of one random bag at one random parameter point.

    DSMIL keeps the critical instance of the unperturbed point and DTFD keeps
    its pseudo-bag split, so the loss is a smooth function of the parameters.
    """
    from .numkernel import numeric_gradient

    setup = GRADCHECK_SETUPS[arch]
    rng = Rng(seed)
    model = build_model(arch, d, n_classes, seed=rng.next_u64(), **setup["hyper"])
    p = setup["p"]
    X = rng.normal_array(p * d).reshape(p, d)
    label = rng.randint(n_classes)
    extra = {}
    if arch == "dsmil":
        extra["critical"] = model.forward(X).aux["critical"]
    elif arch == "dtfd":
        extra["groups"] = pseudo_bag_split(p, model.hyper["m_pseudo"], Rng(rng.next_u64()))

    def loss_fn(flat):
        loss, grads, _ = model.with_params(flat).loss_and_grad(X, label, **extra)
        return loss, grads.flat

    _, analytic, numeric = numeric_gradient(loss_fn, model.params.flat, eps)
    return analytic, numeric


def gradient_suite(n_points: int = 10, seed: int = 0, archs=None, eps: float = 1e-5) -> list[GradcheckResult]:
    from .numkernel import relative_errors

    results = []
    for arch in archs or list(MODELS):
        worst_rel = worst_scaled = 0.0
        for i in range(n_points):
            analytic, numeric = gradcheck_point(arch, seed * 1000 + i, eps=eps)
            worst_rel = max(worst_rel, float(relative_errors(analytic, numeric).max()))
            scale = max(float(np.abs(analytic).max()), 1e-12)
            worst_scaled = max(worst_scaled, float(np.abs(analytic - numeric).max()) / scale)
        results.append(GradcheckResult(arch, worst_rel, worst_scaled, n_points))
    return results
