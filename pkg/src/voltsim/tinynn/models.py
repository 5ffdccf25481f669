"""Toy planner/controller transformers and the entropy predictor CNN.

Training and reference inference run in float64. Quantized inference routes
every weight-bearing GEMM through qgemm.faulty_gemm, selected by component
tag, so fault injection and anomaly clearance reach exactly the layers named
by the tag set. Attention internals, softmax and normalization stay in full
precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import qgemm
from ..errmodel import DEFAULT_WORD_WIDTH, RngStream
from ..qgemm import GemmFaultConfig, QuantizedMatrix
from . import ops
from .ops import NormStats

COMPONENT_TAGS = frozenset({"Q", "K", "V", "O", "gate", "up", "down", "embed", "head"})

_CLEAN = GemmFaultConfig()


@dataclass(frozen=True)
class TransformerSpec:
    n_layers: int
    hidden_dim: int
    n_heads: int
    mlp_dim: int
    vocab_size: int
    norm: str  # {"rms", "layer"}
    max_seq: int
    causal: bool

    def __post_init__(self):
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must divide evenly across heads")
        if self.hidden_dim & (self.hidden_dim - 1):
            raise ValueError("hidden_dim must be a power of two")
        if self.norm not in ("rms", "layer"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "hidden_dim": self.hidden_dim,
            "n_heads": self.n_heads,
            "mlp_dim": self.mlp_dim,
            "vocab_size": self.vocab_size,
            "norm": self.norm,
            "max_seq": self.max_seq,
            "causal": self.causal,
        }


def site_tag(site: str) -> str:
    """Component tag of a GEMM site name."""
    leaf = site.rsplit(".", 1)[-1]
    table = {
        "q": "Q", "k": "K", "v": "V", "o": "O",
        "gate": "gate", "up": "up", "down": "down",
        "patch": "embed", "prompt": "embed", "head": "head",
    }
    if site == "head":
        return "head"
    if leaf in table:
        return table[leaf]
    raise ValueError(f"no component tag for site {site!r}")


def normalize_target(target) -> frozenset | str:
    if target in ("all", "none"):
        return target
    if isinstance(target, str):
        tags = frozenset(t.strip() for t in target.split(",") if t.strip())
    else:
        tags = frozenset(target)
    bad = tags - COMPONENT_TAGS
    if bad:
        raise ValueError(f"unknown component tags {sorted(bad)}")
    return tags


@dataclass
class RunContext:
    """Per-forward quantized-inference configuration.

    Injection and the AD output stage apply at sites whose tag is targeted;
    untargeted sites run the same quantized path fault-free. op_counts
    accumulates MACs per site; capture collects per-call output maxima for
    offline bound calibration; probe collects NormStats per norm invocation.
    """

    fault_cfg: GemmFaultConfig | None = None
    target: frozenset | str = "none"
    rng: RngStream | None = None
    bounds: dict = field(default_factory=dict)
    op_counts: dict | None = None
    probe: list | None = None
    capture: dict | None = None
    dmr: bool = False
    macs_active: int = 0  # MACs executed at the unit's operating voltage
    macs_recompute: int = 0  # DMR fault-free recomputes, charged at nominal

    def __post_init__(self):
        self.target = normalize_target(self.target)

    def targets_site(self, site: str) -> bool:
        if self.target == "all":
            return True
        if self.target == "none":
            return False
        return site_tag(site) in self.target


def _qlinear(x: np.ndarray, wq: QuantizedMatrix, site: str, run: RunContext) -> np.ndarray:
    """Quantize activations, run the faulty engine, dequantize."""
    amax = float(np.max(np.abs(x)))
    a_scale = amax / 127.0 if amax > 0 else 1.0
    xq = qgemm.quantize(x, a_scale)
    width = max(DEFAULT_WORD_WIDTH, qgemm.required_width(x.shape[-1]))
    targeted = run.fault_cfg is not None and run.targets_site(site)
    if targeted:
        cfg = run.fault_cfg
        rng = run.rng.child(site) if run.rng is not None else None
        bound = run.bounds.get(site)
    else:
        cfg, rng, bound = _CLEAN, None, None
    macs = x.shape[0] * x.shape[-1] * wq.cols
    if run.op_counts is not None:
        run.op_counts[site] = run.op_counts.get(site, 0) + macs
    if run.dmr and targeted:
        # duplicate execution with independent masks; disagreement triggers a
        # fault-free recompute (charged at nominal by the episode loop)
        r0 = rng.child("dmr0") if rng is not None else None
        r1 = rng.child("dmr1") if rng is not None else None
        acc, _ = qgemm.faulty_gemm(xq, wq, cfg, r0, width=width, bound=None)
        acc2, _ = qgemm.faulty_gemm(xq, wq, cfg, r1, width=width, bound=None)
        run.macs_active += 2 * macs
        if not np.array_equal(acc, acc2):
            acc, _ = qgemm.faulty_gemm(xq, wq, _CLEAN, None, width=width, bound=None)
            run.macs_recompute += macs
    else:
        acc, _ = qgemm.faulty_gemm(xq, wq, cfg, rng, width=width, bound=bound)
        run.macs_active += macs
    out = acc.astype(np.float64) * (a_scale * wq.scale)
    if run.capture is not None:
        run.capture.setdefault(site, []).append(
            np.array([np.max(np.abs(out))]) if out.size else np.zeros(1)
        )
    return out


def _norm_q(x, g, b, kind, site, run):
    if run.probe is not None:
        run.probe.append((site, ops.stats_of(x)))
    if kind == "rms":
        y, _ = ops.rmsnorm_fwd(x, g)
    else:
        y, _ = ops.layernorm_fwd(x, g, b)
    return y


class _TransformerCore:
    """Shared parameter container: planner and controller block stacks."""

    def __init__(self, spec: TransformerSpec, params: dict):
        self.spec = spec
        self.params = params
        self._qweights: dict | None = None
        self.bounds: dict = {}
        self.flags = {"gain_folded": False, "rotated": False}

    # --- quantized weights -------------------------------------------
    def gemm_sites(self) -> list:
        sites = []
        for i in range(self.spec.n_layers):
            for leaf in ("q", "k", "v", "o", "gate", "up", "down"):
                sites.append(f"l{i}.{leaf}")
        sites.append("head")
        return sites

    def _site_param(self, site: str) -> str:
        return site

    def invalidate_qweights(self):
        self._qweights = None

    def qweights(self) -> dict:
        if self._qweights is None:
            qw = {}
            for site in self.gemm_sites():
                w = self.params[self._site_param(site)]
                wmax = float(np.max(np.abs(w)))
                scale = wmax / 127.0 if wmax > 0 else 1.0
                qw[site] = qgemm.quantize(w, scale)
            self._qweights = qw
        return self._qweights

    # --- quantized block stack ---------------------------------------
    def _q_blocks(self, x: np.ndarray, run: RunContext) -> np.ndarray:
        """x: (T, D) residual stream; returns final-norm output (T, D)."""
        p, spec = self.params, self.spec
        qw = self.qweights()
        kind = spec.norm
        for i in range(spec.n_layers):
            pre = f"l{i}."
            g1 = p[pre + "ln1.g"]
            b1 = p.get(pre + "ln1.b")
            h = _norm_q(x, g1, b1, kind, pre + "ln1", run)
            q = _qlinear(h, qw[pre + "q"], pre + "q", run)
            k = _qlinear(h, qw[pre + "k"], pre + "k", run)
            v = _qlinear(h, qw[pre + "v"], pre + "v", run)
            a, _ = ops.attention_fwd(
                q[None], k[None], v[None], spec.n_heads, spec.causal
            )
            x = x + _qlinear(a[0], qw[pre + "o"], pre + "o", run)
            g2 = p[pre + "ln2.g"]
            b2 = p.get(pre + "ln2.b")
            h2 = _norm_q(x, g2, b2, kind, pre + "ln2", run)
            gt = _qlinear(h2, qw[pre + "gate"], pre + "gate", run)
            up = _qlinear(h2, qw[pre + "up"], pre + "up", run)
            s, _ = ops.silu_fwd(gt)
            x = x + _qlinear(s * up, qw[pre + "down"], pre + "down", run)
        return _norm_q(x, p["final.g"], p.get("final.b"), kind, "final", run)

    # --- full-precision block stack (with caches) --------------------
    def _fp_blocks(self, x: np.ndarray):
        """x: (B, T, D); returns (final-norm output, caches)."""
        p, spec = self.params, self.spec
        kind = spec.norm
        caches = []
        for i in range(spec.n_layers):
            pre = f"l{i}."
            if kind == "rms":
                h, cn1 = ops.rmsnorm_fwd(x, p[pre + "ln1.g"])
            else:
                h, cn1 = ops.layernorm_fwd(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q, cq = ops.linear_fwd(h, p[pre + "q"])
            k, ck = ops.linear_fwd(h, p[pre + "k"])
            v, cv = ops.linear_fwd(h, p[pre + "v"])
            a, ca = ops.attention_fwd(q, k, v, spec.n_heads, spec.causal)
            o, co = ops.linear_fwd(a, p[pre + "o"])
            x = x + o
            if kind == "rms":
                h2, cn2 = ops.rmsnorm_fwd(x, p[pre + "ln2.g"])
            else:
                h2, cn2 = ops.layernorm_fwd(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            gt, cg = ops.linear_fwd(h2, p[pre + "gate"])
            up, cu = ops.linear_fwd(h2, p[pre + "up"])
            s, cs = ops.silu_fwd(gt)
            m = s * up
            d, cd = ops.linear_fwd(m, p[pre + "down"])
            x = x + d
            caches.append((cn1, cq, ck, cv, ca, co, cn2, cg, cu, cs, s, up, cd))
        if kind == "rms":
            xf, cf = ops.rmsnorm_fwd(x, p["final.g"])
        else:
            xf, cf = ops.layernorm_fwd(x, p["final.g"], p["final.b"])
        return xf, (caches, cf)

    def _fp_blocks_bwd(self, dxf, cache, grads):
        caches, cf = cache
        p, spec = self.params, self.spec
        kind = spec.norm
        if kind == "rms":
            dx, dg = ops.rmsnorm_bwd(dxf, cf)
            grads["final.g"] += dg
        else:
            dx, dg, db = ops.layernorm_bwd(dxf, cf)
            grads["final.g"] += dg
            grads["final.b"] += db
        for i in reversed(range(spec.n_layers)):
            pre = f"l{i}."
            cn1, cq, ck, cv, ca, co, cn2, cg, cu, cs, s, up, cd = caches[i]
            dm, dwd = ops.linear_bwd(dx, cd)
            grads[pre + "down"] += dwd
            ds = dm * up
            dup = dm * s
            dgt = ops.silu_bwd(ds, cs)
            dh2a, dwu = ops.linear_bwd(dup, cu)
            grads[pre + "up"] += dwu
            dh2b, dwg = ops.linear_bwd(dgt, cg)
            grads[pre + "gate"] += dwg
            if kind == "rms":
                dxn, dg2 = ops.rmsnorm_bwd(dh2a + dh2b, cn2)
                grads[pre + "ln2.g"] += dg2
            else:
                dxn, dg2, db2 = ops.layernorm_bwd(dh2a + dh2b, cn2)
                grads[pre + "ln2.g"] += dg2
                grads[pre + "ln2.b"] += db2
            dx = dx + dxn
            da, dwo = ops.linear_bwd(dx, co)
            grads[pre + "o"] += dwo
            dq, dk, dv = ops.attention_bwd(da, ca)
            dh1, dwq = ops.linear_bwd(dq, cq)
            grads[pre + "q"] += dwq
            dh1b, dwk = ops.linear_bwd(dk, ck)
            grads[pre + "k"] += dwk
            dh1c, dwv = ops.linear_bwd(dv, cv)
            grads[pre + "v"] += dwv
            if kind == "rms":
                dxn1, dg1 = ops.rmsnorm_bwd(dh1 + dh1b + dh1c, cn1)
                grads[pre + "ln1.g"] += dg1
            else:
                dxn1, dg1, db1 = ops.layernorm_bwd(dh1 + dh1b + dh1c, cn1)
                grads[pre + "ln1.g"] += dg1
                grads[pre + "ln1.b"] += db1
            dx = dx + dxn1
        return dx

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def _init_block_params(spec: TransformerSpec, rng: RngStream, params: dict):
    gen = rng.generator
    D, M = spec.hidden_dim, spec.mlp_dim
    for i in range(spec.n_layers):
        pre = f"l{i}."
        params[pre + "ln1.g"] = np.ones(D)
        params[pre + "ln2.g"] = np.ones(D)
        if spec.norm == "layer":
            params[pre + "ln1.b"] = np.zeros(D)
            params[pre + "ln2.b"] = np.zeros(D)
        for leaf in ("q", "k", "v", "o"):
            params[pre + leaf] = gen.normal(0, D**-0.5, size=(D, D))
        params[pre + "gate"] = gen.normal(0, D**-0.5, size=(D, M))
        params[pre + "up"] = gen.normal(0, D**-0.5, size=(D, M))
        params[pre + "down"] = gen.normal(0, M**-0.5, size=(M, D))
    params["final.g"] = np.ones(D)
    if spec.norm == "layer":
        params["final.b"] = np.zeros(D)


class PlannerModel(_TransformerCore):
    """Token-level causal transformer: task prompt in, subtask plan out."""

    kind = "planner"

    def __init__(self, spec: TransformerSpec, params: dict):
        super().__init__(spec, params)

    @classmethod
    def init(cls, spec: TransformerSpec, rng: RngStream) -> "PlannerModel":
        gen = rng.generator
        D = spec.hidden_dim
        params = {
            "embed": gen.normal(0, 0.5, size=(spec.vocab_size, D)),
            "pos": gen.normal(0, 0.1, size=(spec.max_seq, D)),
        }
        _init_block_params(spec, rng, params)
        params["head"] = rng.generator.normal(0, D**-0.5, size=(D, spec.vocab_size))
        return cls(spec, params)

    # --- quantized inference ------------------------------------------
    def q_forward(self, ids: np.ndarray, run: RunContext, last_only: bool = True):
        ids = np.asarray(ids, dtype=np.int64)
        x = self.params["embed"][ids] + self.params["pos"][: len(ids)]
        xf = self._q_blocks(x, run)
        if last_only:
            return _qlinear(xf[-1:], self.qweights()["head"], "head", run)[0]
        return _qlinear(xf, self.qweights()["head"], "head", run)

    def decode(
        self,
        prompt_ids,
        run_factory,
        max_new: int,
        eos_id: int,
    ) -> list:
        """Greedy decode; run_factory(t) builds the RunContext for step t."""
        ids = list(prompt_ids)
        out = []
        for t in range(max_new):
            if len(ids) >= self.spec.max_seq:
                break
            logits = self.q_forward(np.array(ids), run_factory(t))
            nxt = int(np.argmax(logits))
            ids.append(nxt)
            if nxt == eos_id:
                break
            out.append(nxt)
        return out

    # --- full precision ------------------------------------------------
    def fp_forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        x = (self.params["embed"][ids] + self.params["pos"][: len(ids)])[None]
        xf, _ = self._fp_blocks(x)
        return (xf @ self.params["head"])[0]

    def fp_decode(self, prompt_ids, max_new: int, eos_id: int) -> list:
        ids = list(prompt_ids)
        out = []
        for _ in range(max_new):
            if len(ids) >= self.spec.max_seq:
                break
            logits = self.fp_forward(np.array(ids))
            nxt = int(np.argmax(logits[-1]))
            ids.append(nxt)
            if nxt == eos_id:
                break
            out.append(nxt)
        return out

    @staticmethod
    def collate(samples):
        return samples

    def loss_and_grads(self, batch, loss: str = "cross_entropy"):
        if loss != "cross_entropy":
            raise ValueError("planner trains with cross_entropy")
        grads = self.zero_grads()
        total, wsum = 0.0, 0.0
        for ids, mask in batch:
            ids = np.asarray(ids, dtype=np.int64)
            mask = np.asarray(mask, dtype=np.float64)
            inp, tgt, w = ids[:-1], ids[1:], mask[1:]
            x = (self.params["embed"][inp] + self.params["pos"][: len(inp)])[None]
            xf, cache = self._fp_blocks(x)
            logits, ch = ops.linear_fwd(xf, self.params["head"])
            li, dlogits = ops.cross_entropy(logits[0], tgt, w)
            sw = float(np.sum(w))
            total += li * sw
            wsum += sw
            dxf, dwh = ops.linear_bwd(dlogits[None] * sw, ch)
            grads["head"] += dwh
            dx = self._fp_blocks_bwd(dxf, cache, grads)[0]
            np.add.at(grads["embed"], inp, dx)
            grads["pos"][: len(inp)] += dx
        for k in grads:
            grads[k] /= wsum
        return total / wsum, grads


class ControllerModel(_TransformerCore):
    """Patch-token transformer policy: local view + subtask prompt to action."""

    kind = "controller"
    PATCH = 5  # image split into 3x3 grid of 5x5 patches
    N_PATCH = 9
    PROMPT_DIM = 512

    def __init__(self, spec: TransformerSpec, params: dict, n_actions: int = 9):
        super().__init__(spec, params)
        self.n_actions = n_actions

    @classmethod
    def init(cls, spec: TransformerSpec, rng: RngStream, n_actions: int = 9):
        gen = rng.generator
        D = spec.hidden_dim
        pdim = 3 * cls.PATCH * cls.PATCH
        params = {
            "patch.w": gen.normal(0, pdim**-0.5, size=(pdim, D)),
            "prompt.w": gen.normal(0, cls.PROMPT_DIM**-0.5, size=(cls.PROMPT_DIM, D)),
            "pos": gen.normal(0, 0.1, size=(cls.N_PATCH + 1, D)),
        }
        _init_block_params(spec, rng, params)
        params["head"] = gen.normal(0, D**-0.5, size=(D, n_actions))
        return cls(spec, params, n_actions)

    def gemm_sites(self) -> list:
        return ["embed.patch", "embed.prompt"] + super().gemm_sites()

    def _site_param(self, site: str) -> str:
        return {"embed.patch": "patch.w", "embed.prompt": "prompt.w"}.get(site, site)

    @staticmethod
    def patchify(image: np.ndarray) -> np.ndarray:
        """(3, 15, 15) -> (9, 75) row-major patch grid."""
        C, H, W = image.shape
        P = ControllerModel.PATCH
        g = image.reshape(C, H // P, P, W // P, P)
        return g.transpose(1, 3, 0, 2, 4).reshape((H // P) * (W // P), C * P * P)

    # --- quantized inference ------------------------------------------
    def q_forward(self, image: np.ndarray, prompt: np.ndarray, run: RunContext):
        patches = self.patchify(image)
        tp = _qlinear(patches, self.qweights()["embed.patch"], "embed.patch", run)
        tq = _qlinear(prompt[None], self.qweights()["embed.prompt"], "embed.prompt", run)
        x = np.concatenate([tq, tp], axis=0) + self.params["pos"]
        xf = self._q_blocks(x, run)
        pooled = np.mean(xf, axis=0, keepdims=True)
        return _qlinear(pooled, self.qweights()["head"], "head", run)[0]

    def act(self, image, prompt, run: RunContext, sample_stream: RngStream) -> int:
        """Temperature-1 sampling from the action distribution."""
        logits = self.q_forward(image, prompt, run)
        p = ops.softmax(logits)
        u = float(sample_stream.uniform())
        return int(np.searchsorted(np.cumsum(p), u).clip(0, self.n_actions - 1))

    # --- full precision ------------------------------------------------
    def fp_forward(self, images: np.ndarray, prompts: np.ndarray):
        B = images.shape[0]
        patches = np.stack([self.patchify(im) for im in images])  # (B, 9, 75)
        tp, cp = ops.linear_fwd(patches, self.params["patch.w"])
        tq, cq = ops.linear_fwd(prompts[:, None, :], self.params["prompt.w"])
        x = np.concatenate([tq, tp], axis=1) + self.params["pos"][None]
        xf, cache = self._fp_blocks(x)
        pooled = np.mean(xf, axis=1)
        logits, ch = ops.linear_fwd(pooled, self.params["head"])
        return logits, (cp, cq, cache, ch, xf.shape)

    @staticmethod
    def collate(samples):
        images = np.stack([s[0] for s in samples])
        prompts = np.stack([s[1] for s in samples])
        actions = np.array([s[2] for s in samples], dtype=np.int64)
        return images, prompts, actions

    def loss_and_grads(self, batch, loss: str = "cross_entropy"):
        if loss != "cross_entropy":
            raise ValueError("controller trains with cross_entropy")
        images, prompts, actions = batch
        logits, (cp, cq, cache, ch, xshape) = self.fp_forward(images, prompts)
        li, dlogits = ops.cross_entropy(logits, actions)
        grads = self.zero_grads()
        dpool, dwh = ops.linear_bwd(dlogits, ch)
        grads["head"] += dwh
        dxf = np.repeat(dpool[:, None, :], xshape[1], axis=1) / xshape[1]
        dx = self._fp_blocks_bwd(dxf, cache, grads)
        grads["pos"] += dx.sum(axis=0)
        dtq, dtp = dx[:, :1, :], dx[:, 1:, :]
        _, dwp = ops.linear_bwd(dtp, cp)
        grads["patch.w"] += dwp
        _, dwq = ops.linear_bwd(dtq, cq)
        grads["prompt.w"] += dwq
        return li, grads


class EntropyPredictor:
    """Small CNN regressor: observation + prompt embedding -> action entropy.

    Image branch: three stride-3 pad-1 3x3 convs (3 -> 16 -> 32 -> 64), ReLU
    after each, 2x2 max pool after the first two, global average pool to a
    64-vector.  Prompt branch: one linear 512 -> 64.  Fusion: concat(128) ->
    linear 128 -> ReLU -> linear 1.
    """

    kind = "predictor"
    PROMPT_DIM = 512

    def __init__(self, params: dict):
        self.params = params
        self.flags = {}
        # fixed inference cost in MACs, charged by the voltage controller
        self.macs = (
            5 * 5 * 16 * 27  # conv1: 5x5 output map, 3*3*3 taps
            + 1 * 1 * 32 * 144  # conv2: 1x1 output, 16*3*3 taps
            + 1 * 1 * 64 * 288  # conv3: 1x1 output, 32*3*3 taps
            + self.PROMPT_DIM * 64
            + 128 * 128
            + 128
        )

    @classmethod
    def init(cls, rng: RngStream) -> "EntropyPredictor":
        gen = rng.generator
        params = {
            "c1.w": gen.normal(0, 27**-0.5, size=(16, 3, 3, 3)),
            "c1.b": np.zeros(16),
            "c2.w": gen.normal(0, 144**-0.5, size=(32, 16, 3, 3)),
            "c2.b": np.zeros(32),
            "c3.w": gen.normal(0, 288**-0.5, size=(64, 32, 3, 3)),
            "c3.b": np.zeros(64),
            "fcp.w": gen.normal(0, cls.PROMPT_DIM**-0.5, size=(cls.PROMPT_DIM, 64)),
            "fcp.b": np.zeros(64),
            "fc1.w": gen.normal(0, 128**-0.5, size=(128, 128)),
            "fc1.b": np.zeros(128),
            "fc2.w": gen.normal(0, 128**-0.5, size=(128, 1)),
            "fc2.b": np.zeros(1),
        }
        return cls(params)

    def fp_forward(self, images: np.ndarray, prompts: np.ndarray):
        p = self.params
        c1, k1 = ops.conv2d_fwd(images, p["c1.w"], p["c1.b"], stride=3, pad=1)
        r1, a1 = ops.relu_fwd(c1)
        p1, m1 = ops.maxpool2d_fwd(r1)
        c2, k2 = ops.conv2d_fwd(p1, p["c2.w"], p["c2.b"], stride=3, pad=1)
        r2, a2 = ops.relu_fwd(c2)
        p2, m2 = ops.maxpool2d_fwd(r2)
        c3, k3 = ops.conv2d_fwd(p2, p["c3.w"], p["c3.b"], stride=3, pad=1)
        r3, a3 = ops.relu_fwd(c3)
        g = r3.mean(axis=(2, 3))
        pp, kp = ops.linear_fwd(prompts, p["fcp.w"])
        pp = pp + p["fcp.b"]
        cat = np.concatenate([g, pp], axis=1)
        h1, kh = ops.linear_fwd(cat, p["fc1.w"])
        rh, ah = ops.relu_fwd(h1 + p["fc1.b"])
        y, ky = ops.linear_fwd(rh, p["fc2.w"])
        out = y[:, 0] + p["fc2.b"][0]
        cache = (k1, a1, m1, k2, a2, m2, k3, a3, r3.shape, kp, kh, ah, ky)
        return out, cache

    def predict(self, image: np.ndarray, prompt: np.ndarray) -> float:
        out, _ = self.fp_forward(image[None], prompt[None])
        return float(out[0])

    @staticmethod
    def collate(samples):
        images = np.stack([s[0] for s in samples])
        prompts = np.stack([s[1] for s in samples])
        targets = np.array([s[2] for s in samples], dtype=np.float64)
        return images, prompts, targets

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def loss_and_grads(self, batch, loss: str = "mse"):
        if loss != "mse":
            raise ValueError("predictor trains with mse")
        images, prompts, targets = batch
        out, cache = self.fp_forward(images, prompts)
        li, dout = ops.mse(out, targets)
        k1, a1, m1, k2, a2, m2, k3, a3, r3shape, kp, kh, ah, ky = cache
        grads = self.zero_grads()
        dy = dout[:, None]
        grads["fc2.b"][0] += dout.sum()
        drh, dw2 = ops.linear_bwd(dy, ky)
        grads["fc2.w"] += dw2
        dh1 = ops.relu_bwd(drh, ah)
        grads["fc1.b"] += dh1.sum(axis=0)
        dcat, dw1 = ops.linear_bwd(dh1, kh)
        grads["fc1.w"] += dw1
        dg, dpp = dcat[:, :64], dcat[:, 64:]
        grads["fcp.b"] += dpp.sum(axis=0)
        _, dwp = ops.linear_bwd(dpp, kp)
        grads["fcp.w"] += dwp
        # global average pool spreads the gradient uniformly over the map
        hw = r3shape[2] * r3shape[3]
        dr3 = np.broadcast_to(dg[:, :, None, None] / hw, r3shape)
        dc3 = ops.relu_bwd(dr3, a3)
        dp2, dw, db = ops.conv2d_bwd(dc3, k3)
        grads["c3.w"] += dw
        grads["c3.b"] += db
        dr2 = ops.maxpool2d_bwd(dp2, m2)
        dc2 = ops.relu_bwd(dr2, a2)
        dp1, dw, db = ops.conv2d_bwd(dc2, k2)
        grads["c2.w"] += dw
        grads["c2.b"] += db
        dr1 = ops.maxpool2d_bwd(dp1, m1)
        dc1 = ops.relu_bwd(dr1, a1)
        _, dw, db = ops.conv2d_bwd(dc1, k1)
        grads["c1.w"] += dw
        grads["c1.b"] += db
        return li, grads


def forward(model, inputs, fault_cfg=None, target="none", rng=None,
            probe=None, op_counts=None, bounds=None):
    """Quantized forward with component-tag fault routing."""
    run = RunContext(
        fault_cfg=fault_cfg,
        target=target,
        rng=rng,
        bounds=bounds if bounds is not None else getattr(model, "bounds", {}),
        op_counts=op_counts,
        probe=probe,
    )
    if isinstance(model, PlannerModel):
        return model.q_forward(inputs, run, last_only=False)
    if isinstance(model, ControllerModel):
        image, prompt = inputs
        return model.q_forward(image, prompt, run)
    raise TypeError(f"no quantized forward for {type(model).__name__}")


def calibrate_model(model, inputs, margin: float = 1.0) -> dict:
    """Calibrate per-site anomaly bounds from fault-free quantized forwards.

    inputs: planner -> iterable of token id sequences; controller ->
    iterable of (image, prompt) pairs. Bounds are stored on the model and
    returned.
    """
    capture: dict = {}
    run = RunContext(capture=capture)
    for item in inputs:
        if isinstance(model, PlannerModel):
            model.q_forward(np.asarray(item), run, last_only=False)
        elif isinstance(model, ControllerModel):
            image, prompt = item
            model.q_forward(image, prompt, run)
        else:
            raise TypeError(f"no calibration path for {type(model).__name__}")
    bounds = {}
    for site, chunks in capture.items():
        bounds[site] = qgemm.calibrate_bound(np.concatenate(chunks), margin)
    model.bounds = bounds
    return bounds
