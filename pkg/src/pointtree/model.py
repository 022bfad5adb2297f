"""The recursive point cloud generator.

A shape is produced coarse to fine: starting from a single root point at
the origin with the whole latent code as its structural representation and
a movement radius of 1, every stage splits each point into k(d) children.
One shared pair of matrices turns a parent's position and representation
into the representation its children inherit; one shared MLP, fed that
representation next to a per-child stage embedding, emits each child's
offset direction and a contraction of the movement radius. Offsets are
normalized by the largest sibling offset, so every child lands inside its
parent's radius and radii shrink monotonically along any root-to-leaf path.

Because children occupy contiguous output slots, the stages form an
explicit tree; labelling leaves by their ancestor at a chosen stage yields
an unsupervised part segmentation.

Everything here is built from the autodiff primitives, whose matmul
accumulates in fixed index order. Batched stage computation is therefore
bit-identical to expanding one point at a time, and the encoder is exactly
permutation invariant, not approximately so.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ENCODER_WIDTHS = (64, 128, 256)  # shared per-point MLP, applied to every point
OFFSET_NORM_FLOOR = 1e-12  # sibling offsets may all vanish; never divide by zero


@dataclass
class GeneratorConfig:
    """Architecture description; the branching schedule fixes the leaf count."""

    k_schedule: tuple = (8, 4, 4, 4, 4)
    latent_width: int = 512
    embed_width: int = 64
    mlp_hidden: tuple = (256, 256)
    vae_mode: bool = False

    def __post_init__(self):
        self.k_schedule = tuple(int(k) for k in self.k_schedule)
        self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
        if len(self.k_schedule) < 1:
            raise ValueError("k_schedule must name at least one stage")
        if any(k < 1 for k in self.k_schedule):
            raise ValueError(f"branching factors must be >= 1, got {self.k_schedule}")
        if min(self.latent_width, self.embed_width) < 1:
            raise ValueError("latent_width and embed_width must be positive")
        if len(self.mlp_hidden) < 1 or any(w < 1 for w in self.mlp_hidden):
            raise ValueError("mlp_hidden needs at least one positive width")

    @property
    def stage_count(self) -> int:
        return len(self.k_schedule)

    @property
    def leaf_count(self) -> int:
        return int(np.prod(self.k_schedule, dtype=np.int64))

    def stage_sizes(self) -> list:
        """Point count after each stage, length stage_count + 1, starts at 1."""
        sizes = [1]
        for k in self.k_schedule:
            sizes.append(sizes[-1] * k)
        return sizes

    def to_dict(self) -> dict:
        return {
            "k_schedule": list(self.k_schedule),
            "latent_width": self.latent_width,
            "embed_width": self.embed_width,
            "mlp_hidden": list(self.mlp_hidden),
            "vae_mode": self.vae_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def preset(name: str) -> GeneratorConfig:
    """Named default architectures, keyed by their leaf count."""
    presets = {
        "2048": GeneratorConfig(k_schedule=(8, 4, 4, 4, 4)),
        "3125": GeneratorConfig(k_schedule=(5, 5, 5, 5, 5)),
    }
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(presets)}")
    return presets[name]


def parameter_spec(config: GeneratorConfig) -> list:
    """Canonical ordered list of (name, shape, init_kind, fan_in).

    The order is the initialization draw order and the checkpoint manifest
    order, so it must stay stable.
    """
    spec = []

    def linear(prefix, n_in, n_out):
        spec.append((f"{prefix}.w", (n_in, n_out), "uniform", n_in))
        spec.append((f"{prefix}.b", (n_out,), "uniform", n_in))

    prev = 3
    for i, width in enumerate(ENCODER_WIDTHS):
        linear(f"enc.pp{i}", prev, width)
        prev = width
    if config.vae_mode:
        linear("enc.mu", prev, config.latent_width)
        linear("enc.logvar", prev, config.latent_width)
    else:
        linear("enc.head", prev, config.latent_width)

    u = config.latent_width
    spec.append(("sub.ms", (u, 3), "uniform", 3))
    spec.append(("sub.mh", (u, u), "uniform", u))

    prev = config.embed_width + u
    for i, width in enumerate(config.mlp_hidden):
        linear(f"exp.l{i}", prev, width)
        prev = width
    linear("exp.offset", prev, 3)
    linear("exp.scale", prev, 1)

    for d, k in enumerate(config.k_schedule):
        spec.append((f"emb.d{d}", (k, config.embed_width), "embed", 0))
    return spec


class Parameters:
    """All trainable weights, keyed by name, plus the config they belong to."""

    def __init__(self, config: GeneratorConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        expected = [name for name, *_ in parameter_spec(config)]
        if list(tensors) != expected:
            raise ValueError("parameter set does not match the config's spec")

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def total_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def encoder_count(self) -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith("enc."))

    def generator_count(self) -> int:
        return self.total_count() - self.encoder_count()

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            self.config,
            {
                n: ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                for n, t in self.tensors.items()
            },
        )

    def copy(self) -> "Parameters":
        return self.astype(self.dtype)


def init_parameters(config: GeneratorConfig, seed: int = 0, dtype=np.float32) -> Parameters:
    """Deterministic weights: fan-in-scaled uniform, embeddings normal x 0.1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind, fan_in in parameter_spec(config):
        if kind == "embed":
            data = rng.standard_normal(shape) * 0.1
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.Tensor(data.astype(dtype), requires_grad=True)
    return Parameters(config, tensors)


def _broadcast_rows(vec: ad.Tensor, n: int) -> ad.Tensor:
    """Repeat a (w,) vector into n identical rows, staying differentiable."""
    row = ad.reshape(vec, (1, vec.size))
    return ad.gather_rows(row, np.zeros(n, dtype=np.int64))


def _as_tensor(x, dtype) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        if x.dtype != dtype:
            raise TypeError(f"expected dtype {dtype}, got {x.dtype}")
        return x
    return ad.Tensor(np.asarray(x, dtype=dtype))


def encode(cloud, params: Parameters):
    """Whole-shape latent code from a point cloud.

    Shared per-point MLP, max-pool over points per feature, fully-connected
    head. Returns a (latent_width,) tensor, or (mu, log variance) when the
    config is variational. Exactly invariant to point order and duplication:
    per-point rows are computed independently and max is order-free.
    """
    pts = np.asarray(getattr(cloud, "points", cloud))
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected N x 3 points, got shape {pts.shape}")
    n = pts.shape[0]
    h = ad.Tensor(pts.astype(params.dtype, copy=False))
    for i in range(len(ENCODER_WIDTHS)):
        w = params[f"enc.pp{i}.w"]
        b = params[f"enc.pp{i}.b"]
        h = ad.leaky_relu(ad.add(ad.matmul(h, w), _broadcast_rows(b, n)))
    pooled = ad.max_reduce(ad.transpose(h))  # (features,)
    if params.config.vae_mode:
        mu = ad.add(ad.matmul(pooled, params["enc.mu.w"]), params["enc.mu.b"])
        logvar = ad.add(ad.matmul(pooled, params["enc.logvar.w"]), params["enc.logvar.b"])
        return mu, logvar
    return ad.add(ad.matmul(pooled, params["enc.head.w"]), params["enc.head.b"])


def extract_substructure(s, h, params: Parameters) -> ad.Tensor:
    """Representation handed to the children of a point: tanh(Ms s + Mh h)."""
    s = _as_tensor(s, params.dtype)
    h = _as_tensor(h, params.dtype)
    if s.shape != (3,) or h.shape != (params.config.latent_width,):
        raise ValueError(f"expected shapes (3,) and ({params.config.latent_width},)")
    return ad.tanh(ad.add(ad.matmul(params["sub.ms"], s), ad.matmul(params["sub.mh"], h)))


def _expand_stage(points, reps, scales, stage: int, params: Parameters):
    """Split every point of one stage into its k(stage) children.

    points (n,3), reps (n,U), scales (n,1) -> child triple plus the parent
    index per child. Children of point i occupy slots [i*k, (i+1)*k).
    """
    config = params.config
    k = config.k_schedule[stage]
    n = points.shape[0]
    dtype = params.dtype

    sub = ad.tanh(
        ad.add(
            ad.matmul(points, ad.transpose(params["sub.ms"])),
            ad.matmul(reps, ad.transpose(params["sub.mh"])),
        )
    )

    parent_idx = np.repeat(np.arange(n, dtype=np.int64), k)
    child_reps = ad.gather_rows(sub, parent_idx)  # siblings share one row
    embeds = ad.gather_rows(params[f"emb.d{stage}"], np.tile(np.arange(k, dtype=np.int64), n))

    t = ad.concat([embeds, child_reps], axis=1)
    for i in range(len(config.mlp_hidden)):
        w = params[f"exp.l{i}.w"]
        b = params[f"exp.l{i}.b"]
        t = ad.leaky_relu(ad.add(ad.matmul(t, w), _broadcast_rows(b, n * k)))
    offsets = ad.add(ad.matmul(t, params["exp.offset.w"]), _broadcast_rows(params["exp.offset.b"], n * k))
    raw_scale = ad.add(ad.matmul(t, params["exp.scale.w"]), _broadcast_rows(params["exp.scale.b"], n * k))

    child_scales = ad.mul(ad.sigmoid(raw_scale), ad.gather_rows(scales, parent_idx))

    # normalize offsets by the largest sibling offset so the farthest child
    # lands exactly on its shrunken radius and the rest stay inside it
    sibling_max = ad.max_reduce(ad.reshape(ad.norm(offsets), (n, k)))
    floor = ad.Tensor(np.full((n, 1), OFFSET_NORM_FLOOR, dtype=dtype))
    clamped = ad.max_reduce(ad.concat([ad.reshape(sibling_max, (n, 1)), floor], axis=1))
    denom = ad.gather_rows(ad.reshape(clamped, (n, 1)), parent_idx)
    denom3 = ad.concat([denom, denom, denom], axis=1)
    radius3 = ad.concat([child_scales, child_scales, child_scales], axis=1)
    displacement = ad.mul(ad.div(offsets, denom3), radius3)

    child_points = ad.add(ad.gather_rows(points, parent_idx), displacement)
    return child_points, child_reps, child_scales, parent_idx


def expand_point(s, h, alpha: float, stage: int, params: Parameters):
    """Children of a single point: (k,3) positions, (k,U) reps, (k,) radii."""
    config = params.config
    if not 0 <= stage < config.stage_count:
        raise ValueError(f"stage {stage} outside 0..{config.stage_count - 1}")
    alpha = float(alpha)
    if not alpha > 0:
        raise ValueError(f"movement radius must be positive, got {alpha}")
    pts = ad.reshape(_as_tensor(s, params.dtype), (1, 3))
    reps = ad.reshape(_as_tensor(h, params.dtype), (1, config.latent_width))
    scales = ad.Tensor(np.full((1, 1), alpha, dtype=params.dtype))
    cp, cr, cs, _ = _expand_stage(pts, reps, scales, stage, params)
    k = config.k_schedule[stage]
    return cp, cr, ad.reshape(cs, (k,))


@dataclass
class StageState:
    """One stage of an expansion: positions, shared reps, radii, tree links."""

    points: np.ndarray  # (n, 3)
    reps: np.ndarray  # (n, latent_width)
    scales: np.ndarray  # (n,) movement radii, positive
    parent: np.ndarray | None  # (n,) index into the previous stage; None at root

    def __len__(self):
        return self.points.shape[0]


@dataclass
class GenerationTrace:
    """All stages of one generated shape; the last stage is the output cloud."""

    config: GeneratorConfig
    stages: list = field(default_factory=list)

    def leaf_points(self) -> np.ndarray:
        return self.stages[-1].points


def expansion_graph(z, params: Parameters):
    """Differentiable unroll of all stages.

    Returns (points, reps, scales, parents) lists of tensors per stage,
    index 0 being the root. Callers wanting gradients run this under an
    active tape; `generate` wraps it for plain inference.
    """
    config = params.config
    z = _as_tensor(z, params.dtype)
    if z.shape != (config.latent_width,):
        raise ValueError(f"latent code must have shape ({config.latent_width},)")
    points = [ad.Tensor(np.zeros((1, 3), dtype=params.dtype))]
    reps = [ad.reshape(z, (1, config.latent_width))]
    scales = [ad.Tensor(np.ones((1, 1), dtype=params.dtype))]
    parents = [None]
    for stage in range(config.stage_count):
        cp, cr, cs, parent_idx = _expand_stage(
            points[-1], reps[-1], scales[-1], stage, params
        )
        points.append(cp)
        reps.append(cr)
        scales.append(cs)
        parents.append(parent_idx)
    return points, reps, scales, parents


def generate(z, params: Parameters) -> GenerationTrace:
    """Run the full expansion and materialize the tree."""
    points, reps, scales, parents = expansion_graph(z, params)
    trace = GenerationTrace(config=params.config)
    for pt, rep, sc, par in zip(points, reps, scales, parents):
        trace.stages.append(
            StageState(
                points=pt.data,
                reps=rep.data,
                scales=sc.data.reshape(-1),
                parent=par,
            )
        )
    return trace


def segment(trace: GenerationTrace, d: int, d_ancestor: int) -> np.ndarray:
    """Label stage-d points by their ancestor's index at stage d_ancestor."""
    if not 0 <= d_ancestor < d <= trace.config.stage_count:
        raise ValueError(
            f"need 0 <= ancestor stage < stage <= {trace.config.stage_count}, "
            f"got ancestor {d_ancestor}, stage {d}"
        )
    labels = np.arange(len(trace.stages[d_ancestor]), dtype=np.int64)
    for j in range(d_ancestor + 1, d + 1):
        labels = labels[trace.stages[j].parent]
    return labels
