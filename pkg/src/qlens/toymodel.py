"""Small pre-norm decoder-only transformer with per-site injection hooks.

Every matmul weight ("site") can be quantized or perturbed before use, and
every matmul input activation can be quantized or perturbed per forward
call. Training uses torch autograd; injection runs through the numpy
quantizer/perturbation code and is evaluation-only.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from qlens.errors import DivergenceError, InvalidParameterError, QlensError
from qlens.perturb import PerturbSpec, apply_perturbation, gen_perturbation
from qlens.quant import AbsmaxSymmetric, Identity, PerChannel, PerTensor, QuantScheme, SignedPower, fake_quant
from qlens.tensor import RngStream, Tensor, atomic_write_bytes, mix_seed, read_tensor, write_tensor

CHECKPOINT_FORMAT = "qlens-toy-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: Optional[int] = None
    vocab: int = 64
    context: int = 32
    init_seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab", "context"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(name, f"must be positive, got {getattr(self, name)}")
        if self.d_ff is not None and self.d_ff <= 0:
            raise InvalidParameterError("d_ff", f"must be positive, got {self.d_ff}")
        if self.d_model % self.n_heads:
            raise InvalidParameterError("n_heads", f"{self.n_heads} does not divide d_model={self.d_model}")
        if not self.init_std > 0:
            raise InvalidParameterError("init_std", f"must be positive, got {self.init_std}")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model


def site_names(config: ModelConfig) -> list[str]:
    """Names of all matmul weights, in forward order."""
    names = []
    for i in range(config.n_layers):
        p = f"layers.{i}"
        names += [f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv", f"{p}.attn.wo", f"{p}.ffn.w_in", f"{p}.ffn.w_out"]
    return names + ["head"]


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, f, v = config.d_model, config.ffn_dim, config.vocab
    shapes = OrderedDict(embed=(v, d), pos_embed=(config.context, d))
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.w_in"] = (d, f)
        shapes[f"{p}.ffn.w_out"] = (f, d)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["head"] = (d, v)
    return shapes


class ModelParams:
    """Named float32 parameter tensors. Weights are ``(in, out)``: ``y = x @ W``."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, torch.Tensor]):
        shapes = param_shapes(config)
        if list(tensors) != list(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            raise InvalidParameterError("params", f"missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in tensors.items():
            if tuple(t.shape) != shapes[name]:
                raise InvalidParameterError(name, f"shape {tuple(t.shape)} != {shapes[name]}")
            if not torch.isfinite(t).all():
                raise InvalidParameterError(name, "non-finite parameter")
        self.config = config
        self.tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict(
            (k, v.detach().to(torch.float32).clone()) for k, v in tensors.items()
        )

    @property
    def sites(self) -> list[str]:
        return site_names(self.config)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.tensors)

    def equal(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(torch.equal(a, other.tensors[k]) for k, a in self.tensors.items())

    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init(config: ModelConfig, rng: Optional[RngStream] = None) -> ModelParams:
    """Gaussian init (std ``init_std``); residual projections scaled by ``1/sqrt(2L)``.

    Each tensor is drawn from its own substream of ``rng`` (default: a stream
    seeded with ``config.init_seed``), so adding tensors never shifts others.
    """
    rng = rng if rng is not None else RngStream(config.init_seed)
    resid = 1.0 / math.sqrt(2 * config.n_layers)
    tensors = OrderedDict()
    for idx, (name, shape) in enumerate(param_shapes(config).items()):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            std = config.init_std * (resid if name.endswith(("attn.wo", "ffn.w_out")) else 1.0)
            arr = std * rng.substream(idx).normal(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# injection plans


@dataclass(frozen=True)
class Quantize:
    scheme: QuantScheme


@dataclass(frozen=True)
class Perturb:
    spec: PerturbSpec


Action = Optional[Union[Quantize, Perturb]]


@dataclass(frozen=True)
class InjectionPlan:
    weight_actions: Mapping[str, Action] = field(default_factory=dict)
    activation_actions: Mapping[str, Action] = field(default_factory=dict)

    def validate(self, config: ModelConfig) -> None:
        known = set(site_names(config))
        for table in (self.weight_actions, self.activation_actions):
            for name in table:
                if name not in known:
                    raise InvalidParameterError("site", f"unresolvable site {name!r}")
        for name, act in self.activation_actions.items():
            if isinstance(act, Quantize) and not isinstance(act.scheme.granularity, PerTensor):
                raise InvalidParameterError("granularity", f"activation quantization at {name!r} must be per-tensor")

    @property
    def empty(self) -> bool:
        return not any(a is not None for a in self.weight_actions.values()) and not any(
            a is not None for a in self.activation_actions.values()
        )

    @classmethod
    def uniform(cls, config: ModelConfig, weight: Action = None, activation: Action = None) -> "InjectionPlan":
        """Same action on every site."""
        sites = site_names(config)
        return cls(
            {s: weight for s in sites} if weight is not None else {},
            {s: activation for s in sites} if activation is not None else {},
        )


PRESETS = ("fp", "w4a16", "w8a8", "w4a8")


def weight_scheme(bits: int, non_uniform: bool = False) -> QuantScheme:
    """Channel-wise (per output column) symmetric weight quantization."""
    return QuantScheme(bits, AbsmaxSymmetric(), PerChannel(1), SignedPower() if non_uniform else Identity())


def activation_scheme(bits: int, non_uniform: bool = False) -> QuantScheme:
    """Dynamic per-tensor symmetric activation quantization."""
    return QuantScheme(bits, AbsmaxSymmetric(), PerTensor(), SignedPower() if non_uniform else Identity())


def parse_preset(name: str) -> tuple[Optional[int], Optional[int]]:
    """``"w4a8"`` -> ``(4, 8)``; 16 means full precision; ``"fp"`` -> ``(None, None)``."""
    key = name.strip().lower()
    if key == "fp":
        return None, None
    if key.startswith("w") and "a" in key:
        try:
            w, a = (int(v) for v in key[1:].split("a"))
        except ValueError:
            raise InvalidParameterError("preset", f"cannot parse {name!r}") from None
        return (None if w >= 16 else w), (None if a >= 16 else a)
    raise InvalidParameterError("preset", f"unknown preset {name!r}")


def preset_plan(config: ModelConfig, preset: str, non_uniform: bool = False) -> InjectionPlan:
    wb, ab = parse_preset(preset)
    return InjectionPlan.uniform(
        config,
        weight=Quantize(weight_scheme(wb, non_uniform)) if wb else None,
        activation=Quantize(activation_scheme(ab, non_uniform)) if ab else None,
    )


def perturb_plan(
    config: ModelConfig,
    spec: PerturbSpec,
    weights: bool = True,
    activations: bool = True,
) -> InjectionPlan:
    """The same perturbation spec on every weight and/or activation site."""
    act = Perturb(spec)
    return InjectionPlan.uniform(config, weight=act if weights else None, activation=act if activations else None)


def _apply_action(x: np.ndarray, action: Action, rng_seed: int) -> np.ndarray:
    if action is None:
        return x
    t = Tensor(x)
    if isinstance(action, Quantize):
        return fake_quant(t, action.scheme).data
    if isinstance(action, Perturb):
        delta = gen_perturbation(t, action.spec, RngStream(rng_seed))
        return apply_perturbation(t, delta).data
    raise InvalidParameterError("action", f"unknown action {action!r}")


def prepare_weights(params: ModelParams, plan: Optional[InjectionPlan]) -> dict[str, torch.Tensor]:
    """Copies of every site weight with its weight action applied."""
    out = {}
    sites = params.sites
    for idx, name in enumerate(sites):
        act = plan.weight_actions.get(name) if plan is not None else None
        w = params[name]
        if act is not None:
            seed = mix_seed(act.spec.seed, idx) if isinstance(act, Perturb) else 0
            w = torch.from_numpy(_apply_action(w.detach().numpy(), act, seed).copy())
        out[name] = w
    return out


# ---------------------------------------------------------------------------
# forward


def _layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps=1e-5)


class _Hooks:
    def __init__(self, plan: Optional[InjectionPlan], sites: list[str], call_id: int):
        self.plan = plan
        self.index = {s: i for i, s in enumerate(sites)}
        self.call_id = call_id

    def act(self, site: str, x: torch.Tensor) -> torch.Tensor:
        if self.plan is None:
            return x
        action = self.plan.activation_actions.get(site)
        if action is None:
            return x
        seed = 0
        if isinstance(action, Perturb):
            seed = mix_seed(mix_seed(action.spec.seed, 1_000_003 + self.index[site]), self.call_id)
        y = _apply_action(x.detach().numpy(), action, seed)
        return torch.from_numpy(np.array(y))


def forward(
    params: ModelParams,
    tokens,
    plan: Optional[InjectionPlan] = None,
    call_id: int = 0,
    weights: Optional[Mapping[str, torch.Tensor]] = None,
    return_attention: bool = False,
):
    """Logits of shape ``(batch, T, vocab)``.

    ``call_id`` decorrelates activation perturbation draws across calls;
    ``weights`` lets callers reuse :func:`prepare_weights` output.
    """
    cfg = params.config
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.ndim == 1:
        tokens = tokens[None]
    bsz, T = tokens.shape
    if T > cfg.context:
        raise InvalidParameterError("tokens", f"sequence length {T} exceeds context {cfg.context}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab):
        raise InvalidParameterError("tokens", f"token id outside [0, {cfg.vocab})")
    if plan is not None:
        plan.validate(cfg)
        if plan.empty:
            plan = None
    if weights is None:
        weights = prepare_weights(params, plan) if plan is not None else {s: params[s] for s in params.sites}
    hooks = _Hooks(plan, params.sites, call_id)
    P = params.tensors
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    mask = torch.ones(T, T, dtype=torch.bool).tril()
    x = P["embed"][tokens] + P["pos_embed"][:T]
    attn_maps = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a = _layer_norm(x, P[f"{p}.ln1.gain"], P[f"{p}.ln1.bias"])
        q = hooks.act(f"{p}.attn.wq", a) @ weights[f"{p}.attn.wq"]
        k = hooks.act(f"{p}.attn.wk", a) @ weights[f"{p}.attn.wk"]
        v = hooks.act(f"{p}.attn.wv", a) @ weights[f"{p}.attn.wv"]
        q, k, v = (z.view(bsz, T, h, dh).transpose(1, 2) for z in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if return_attention:
            attn_maps.append(attn)
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, T, cfg.d_model)
        x = x + hooks.act(f"{p}.attn.wo", ctx) @ weights[f"{p}.attn.wo"]
        m = _layer_norm(x, P[f"{p}.ln2.gain"], P[f"{p}.ln2.bias"])
        u = F.gelu(hooks.act(f"{p}.ffn.w_in", m) @ weights[f"{p}.ffn.w_in"])
        x = x + hooks.act(f"{p}.ffn.w_out", u) @ weights[f"{p}.ffn.w_out"]
    x = _layer_norm(x, P["ln_f.gain"], P["ln_f.bias"])
    logits = hooks.act("head", x) @ weights["head"]
    if return_attention:
        return logits, attn_maps
    return logits


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic next-token tasks.

    * ``copy``: a random first half (tokens 1..V-1) is repeated; the repeat is scored.
    * ``induction``: distinct first-half tokens; the second half is a random
      rotation of the first, scored from its second position on.
    * ``modadd``: triples ``a b (a+b) mod m``; only the sums are scored.
    """

    kind: str = "copy"
    seq_len: int = 32
    modulus: int = 17

    def __post_init__(self):
        if self.kind not in ("copy", "induction", "modadd"):
            raise InvalidParameterError("kind", f"unknown task {self.kind!r}")
        if self.seq_len < 3:
            raise InvalidParameterError("seq_len", f"must be >= 3, got {self.seq_len}")

    def check(self, config: ModelConfig) -> None:
        if self.seq_len > config.context:
            raise InvalidParameterError("seq_len", f"{self.seq_len} exceeds context {config.context}")
        if self.kind == "induction" and self.seq_len // 2 > config.vocab - 1:
            raise InvalidParameterError("seq_len", "induction needs seq_len/2 distinct tokens")
        if self.kind == "modadd" and self.modulus > config.vocab:
            raise InvalidParameterError("modulus", f"{self.modulus} exceeds vocab {config.vocab}")

    def sample(self, rng: RngStream, batch: int, vocab: int) -> tuple[np.ndarray, np.ndarray]:
        """``(tokens (B, T), scored (B, T-1))``; ``scored[:, j]`` marks the prediction of token ``j+1``."""
        T = self.seq_len
        tokens = np.zeros((batch, T), dtype=np.int64)
        scored = np.zeros((batch, T - 1), dtype=bool)
        half = T // 2
        g = rng.generator
        if self.kind == "copy":
            a = g.integers(1, vocab, size=(batch, half))
            tokens[:, :half] = a
            tokens[:, half : 2 * half] = a
            scored[:, half - 1 : 2 * half - 1] = True
        elif self.kind == "induction":
            for b in range(batch):
                a = g.permutation(vocab - 1)[:half] + 1
                r = int(g.integers(0, half))
                tokens[b, :half] = a
                tokens[b, half : 2 * half] = np.roll(a, -r)
            scored[:, half : 2 * half - 1] = True
        else:
            m = self.modulus
            n = T // 3
            ab = g.integers(0, m, size=(batch, n, 2))
            trip = np.concatenate([ab, (ab.sum(-1, keepdims=True) % m)], axis=-1)
            tokens[:, : 3 * n] = trip.reshape(batch, 3 * n)
            scored[:, 1 : 3 * n - 1 : 3] = True
        return tokens, scored


def loss_and_accuracy(logits: torch.Tensor, tokens, scored) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = torch.as_tensor(tokens)
    scored = torch.as_tensor(scored)
    pred = logits[:, :-1][scored]
    tgt = tokens[:, 1:][scored]
    loss = F.cross_entropy(pred, tgt)
    acc = (pred.argmax(-1) == tgt).float().mean()
    return loss, acc


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32


def train(
    params: ModelParams,
    task: TaskSpec,
    steps: int,
    optimizer_config: OptimizerConfig = OptimizerConfig(),
    rng: Optional[RngStream] = None,
) -> tuple[ModelParams, list[float]]:
    """Adam on scored-token cross-entropy. Returns new params and per-step loss.

    ``steps=0`` returns an unchanged copy. A non-finite loss raises
    :class:`DivergenceError`.
    """
    if steps < 0:
        raise InvalidParameterError("steps", f"must be >= 0, got {steps}")
    task.check(params.config)
    rng = rng if rng is not None else RngStream(0)
    work = ModelParams(params.config, params.tensors)
    leaves = [t.requires_grad_(True) for t in work.tensors.values()]
    opt = torch.optim.Adam(
        leaves,
        lr=optimizer_config.lr,
        betas=(optimizer_config.beta1, optimizer_config.beta2),
        eps=optimizer_config.eps,
    )
    curve: list[float] = []
    for step in range(steps):
        tokens, scored = task.sample(rng.substream(step), optimizer_config.batch_size, params.config.vocab)
        logits = forward(work, tokens)
        loss, _ = loss_and_accuracy(logits, tokens, scored)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step)
        curve.append(value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return ModelParams(params.config, {k: v.detach() for k, v in work.tensors.items()}), curve


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    ce_loss: float
    perplexity: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def evaluate(
    params: ModelParams,
    task: TaskSpec,
    plan: Optional[InjectionPlan] = None,
    n_batches: int = 8,
    batch_size: int = 32,
    seed: int = 1234,
) -> EvalResult:
    """Token-level metrics over ``n_batches`` held-out batches drawn from ``seed``.

    Weight actions are applied once; activation actions per batch.
    """
    task.check(params.config)
    if plan is not None:
        plan.validate(params.config)
        if plan.empty:
            plan = None
    stream = RngStream(seed)
    weights = prepare_weights(params, plan) if plan is not None else None
    total_loss = 0.0
    total_correct = 0.0
    total = 0
    with torch.no_grad():
        for b in range(n_batches):
            tokens, scored = task.sample(stream.substream(b), batch_size, params.config.vocab)
            logits = forward(params, tokens, plan, call_id=b, weights=weights)
            n = int(scored.sum())
            loss, acc = loss_and_accuracy(logits, tokens, scored)
            total_loss += float(loss.double()) * n
            total_correct += float(acc.double()) * n
            total += n
    ce = total_loss / total
    return EvalResult(ce_loss=ce, perplexity=math.exp(ce), accuracy=total_correct / total)


def eval_logits(params: ModelParams, task: TaskSpec, plan: Optional[InjectionPlan] = None, seed: int = 1234, batch_size: int = 32):
    tokens, _ = task.sample(RngStream(seed).substream(0), batch_size, params.config.vocab)
    with torch.no_grad():
        return forward(params, tokens, plan).numpy()


# ---------------------------------------------------------------------------
# gradient check


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, int]


def batch_loss(params: ModelParams, tokens, scored) -> torch.Tensor:
    """Scored-token cross-entropy accumulated in float64 over the model's logits."""
    logits = forward(params, tokens)
    tokens, scored = torch.as_tensor(tokens), torch.as_tensor(scored)
    return F.cross_entropy(logits[:, :-1][scored].double(), tokens[:, 1:][scored])


def grad_check(
    params: ModelParams,
    task: TaskSpec,
    n_coords: int = 128,
    step: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    dtype: torch.dtype = torch.float32,
    abs_floor: float = 1e-3,
) -> GradCheckResult:
    """Autograd gradient vs central finite differences at random coordinates.

    Relative error per coordinate is ``|g_fd - g_ad| / max(|g_fd|, |g_ad|, abs_floor)``;
    the floor keeps flat directions from dividing rounding noise by ~0.
    Coordinates are spread round-robin over every parameter tensor.
    """
    rng = RngStream(seed)
    tokens, scored = task.sample(rng.substream(0), batch_size, params.config.vocab)
    work = {k: v.detach().to(dtype).clone() for k, v in params.tensors.items()}
    probe = _RawParams(params.config, work)
    for t in work.values():
        t.requires_grad_(True)
    loss = batch_loss(probe, tokens, scored)
    grads = torch.autograd.grad(loss, list(work.values()))
    grads = dict(zip(work.keys(), grads))
    names = list(work)
    pick = rng.substream(1).generator
    worst, worst_at = 0.0, ("", -1)
    with torch.no_grad():
        for c in range(n_coords):
            name = names[c % len(names)]
            t = work[name]
            flat = t.view(-1)
            i = int(pick.integers(0, flat.numel()))
            orig = flat[i].item()
            flat[i] = orig + step
            lp = batch_loss(probe, tokens, scored).double().item()
            flat[i] = orig - step
            lm = batch_loss(probe, tokens, scored).double().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * step)
            ad = grads[name].reshape(-1)[i].item()
            err = abs(fd - ad) / max(abs(fd), abs(ad), abs_floor)
            if err > worst:
                worst, worst_at = err, (name, i)
    return GradCheckResult(worst, n_coords, worst_at)


class _RawParams:
    """Duck-typed ``ModelParams`` over live tensors (no copy, any dtype)."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, torch.Tensor]):
        self.config = config
        self.tensors = tensors

    @property
    def sites(self) -> list[str]:
        return site_names(self.config)

    def __getitem__(self, name):
        return self.tensors[name]


# ---------------------------------------------------------------------------
# outlier injection


def inject_outliers(params: ModelParams, fraction: float = 0.01, factor: float = 20.0, rng: Optional[RngStream] = None) -> tuple[ModelParams, list[int]]:
    """Function-preserving activation outliers.

    For a chosen set of hidden channels, every layernorm's gain and bias are
    multiplied by ``factor`` and the matching input rows of the matmuls fed
    by that layernorm are divided by it. The chosen channels of the matmul
    inputs then carry values ``factor`` times larger. At least one channel
    is always chosen.
    """
    if not 0 < fraction <= 1:
        raise InvalidParameterError("fraction", f"must be in (0, 1], got {fraction}")
    if not factor > 0:
        raise InvalidParameterError("factor", f"must be positive, got {factor}")
    cfg = params.config
    rng = rng if rng is not None else RngStream(0)
    n = max(1, int(round(fraction * cfg.d_model)))
    channels = sorted(int(c) for c in rng.permutation(cfg.d_model)[:n])
    idx = torch.tensor(channels)
    out = params.copy().tensors
    groups = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        groups.append((f"{p}.ln1", [f"{p}.attn.wq", f"{p}.attn.wk", f"{p}.attn.wv"]))
        groups.append((f"{p}.ln2", [f"{p}.ffn.w_in"]))
    groups.append(("ln_f", ["head"]))
    for ln, consumers in groups:
        out[f"{ln}.gain"][idx] *= factor
        out[f"{ln}.bias"][idx] *= factor
        for w in consumers:
            out[w][idx, :] /= factor
    return ModelParams(cfg, out), channels


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, directory: Union[str, Path], metadata: Optional[dict] = None) -> None:
    """One QTNS file per parameter plus ``manifest.json`` (written last)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, t in params.tensors.items():
        write_tensor(directory / f"{name}.qtns", Tensor(t.numpy()))
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(params.config),
        "parameters": list(params.tensors),
        "sites": params.sites,
        "metadata": metadata or {},
    }
    atomic_write_bytes(directory / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


class CheckpointError(QlensError):
    exit_code = 2


def load_checkpoint(directory: Union[str, Path]) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {directory}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig(**manifest["config"])
    tensors = OrderedDict()
    for name in manifest["parameters"]:
        tensors[name] = torch.from_numpy(read_tensor(directory / f"{name}.qtns").numpy())
    return ModelParams(config, tensors), manifest.get("metadata", {})


def with_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
