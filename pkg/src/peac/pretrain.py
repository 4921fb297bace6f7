"""Student-teacher pretraining: batch assembly, symmetric passes, SGD, EMA, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from peac.distortion import DistortionConfig, DistortionRecord, maybe_distort
from peac.geometry import (
    Correspondence,
    CropPairPlan,
    GridSpec,
    extract_crops,
    overlap_correspondence,
    patchify,
    prepare_seed_image,
    sample_crop_pair,
)
from peac.model import EncoderConfig, StudentTeacher
from peac.objective import (
    LossBundle,
    LossToggles,
    NonFiniteInputError,
    global_consistency_loss,
    local_consistency_loss,
    order_loss,
    restore_loss,
    total_loss,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# Ablation rows: which distortions are applied and which losses are optimized.
VARIANTS = {
    "peac": dict(od=True, ad=True, order=True, restore=True, global_c=True, local_c=True),
    "peac_oag": dict(od=True, ad=True, order=True, restore=True, global_c=True, local_c=False),
    "peac_og": dict(od=True, ad=False, order=True, restore=False, global_c=True, local_c=False),
    "popar": dict(od=True, ad=True, order=True, restore=True, global_c=False, local_c=False),
    "popar_od": dict(od=True, ad=False, order=True, restore=False, global_c=False, local_c=False),
    "peac_o": dict(od=True, ad=False, order=True, restore=False, global_c=False, local_c=False),
    "peac_a": dict(od=False, ad=True, order=False, restore=True, global_c=False, local_c=False),
}


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    warmup_epochs: float = 5
    epochs: int = 25
    batch_size: int = 8
    ema_alpha: float = 0.999
    variant: str = "peac"
    use_order: bool | None = None
    use_restore: bool | None = None
    use_global: bool | None = None
    use_local: bool | None = None
    p_od: float = 0.5
    p_ad: float = 0.5
    weight_order: float = 1.0
    weight_restore: float = 1.0
    weight_global: float = 1.0
    weight_local: float = 1.0
    grad_clip: float = 0.0
    max_steps: int = 0
    seed: int = 0
    grid_n: int = 11
    grid_m: int = 8
    grid_k: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    checkpoint_every: int = 5  # epochs; 0 = only initial and final

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 < self.ema_alpha < 1:
            raise ConfigError(f"ema_alpha must be in (0, 1), got {self.ema_alpha}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        for p in ("p_od", "p_ad"):
            if not 0 <= getattr(self, p) <= 1:
                raise ConfigError(f"{p} must be a probability")
        if self.variant != "custom":
            if self.variant not in VARIANTS:
                raise ConfigError(f"unknown variant {self.variant!r}; known: {', '.join(VARIANTS)} or custom")
            row = VARIANTS[self.variant]
            for fld, key in (("use_order", "order"), ("use_restore", "restore"), ("use_global", "global_c"), ("use_local", "local_c")):
                v = getattr(self, fld)
                if v is not None and v != row[key]:
                    raise ConfigError(f"{fld}={v} is inconsistent with variant {self.variant!r}; use variant=custom")
        self.grid_spec()  # raises GridSpecError

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_n, self.grid_m, self.grid_k)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            patch_size=self.grid_m, grid=self.grid_k, dim=self.dim, depth=self.depth,
            heads=self.heads, mlp_ratio=self.mlp_ratio,
        )

    def toggles(self) -> LossToggles:
        if self.variant == "custom":
            pick = lambda v: True if v is None else bool(v)  # noqa: E731
            return LossToggles(pick(self.use_order), pick(self.use_restore), pick(self.use_global), pick(self.use_local))
        row = VARIANTS[self.variant]
        return LossToggles(row["order"], row["restore"], row["global_c"], row["local_c"])

    def distortion(self) -> DistortionConfig:
        if self.variant == "custom":
            return DistortionConfig(self.p_od, self.p_ad)
        row = VARIANTS[self.variant]
        return DistortionConfig(self.p_od if row["od"] else 0.0, self.p_ad if row["ad"] else 0.0)

    def weights(self) -> dict:
        return dict(order=self.weight_order, restore=self.weight_restore,
                    global_c=self.weight_global, local_c=self.weight_local)

    def steps_per_epoch(self, n_images: int) -> int:
        return max(1, math.ceil(n_images / self.batch_size))

    def total_steps(self, n_images: int) -> int:
        return self.max_steps or self.epochs * self.steps_per_epoch(n_images)


def _coerce(value: str, typ):
    if typ in ("bool", "bool | None"):
        low = value.lower()
        if low in ("none", ""):
            return None
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys are TrainConfig fields."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(value, types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    """Defaults < config file < explicit overrides (None overrides are ignored)."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(config).items())


def lr_schedule(step: int, config: TrainConfig, steps_per_epoch: int, total_steps: int | None = None) -> float:
    """Linear warmup to ``lr`` then cosine decay reaching 0 on the last step."""
    total = total_steps or config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if step < warm:
        return config.lr * step / warm
    last = total - 1
    if last <= warm:
        return config.lr
    progress = min((step - warm) / (last - warm), 1.0)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# batches

@dataclass
class PreparedBatch:
    """Everything a symmetric step needs, sampled up front.

    ``student_a``/``student_b`` are the distorted views of x/x'; ``clean_a``/
    ``clean_b`` the untouched crops fed to the teacher.
    """

    student_a: np.ndarray
    student_b: np.ndarray
    clean_a: np.ndarray
    clean_b: np.ndarray
    records_a: list[DistortionRecord]
    records_b: list[DistortionRecord]
    plans: list[CropPairPlan]
    correspondences: list[Correspondence]

    def __len__(self):
        return len(self.plans)


def prepare_batch(
    raw_images,
    spec: GridSpec,
    data_rng: np.random.Generator,
    distort_rng: np.random.Generator,
    distortion: DistortionConfig = DistortionConfig(),
) -> PreparedBatch:
    sa, sb, ca, cb, ra, rb, plans, corrs = [], [], [], [], [], [], [], []
    for raw in raw_images:
        plan = sample_crop_pair(spec, data_rng)
        inner = prepare_seed_image(raw, spec, data_rng, inner_offset=plan.inner_offset)
        xa, xb = extract_crops(inner, plan)
        da, rec_a = maybe_distort(xa, distort_rng, spec.m, distortion)
        db, rec_b = maybe_distort(xb, distort_rng, spec.m, distortion)
        sa.append(da)
        sb.append(db)
        ca.append(xa)
        cb.append(xb)
        ra.append(rec_a)
        rb.append(rec_b)
        plans.append(plan)
        corrs.append(overlap_correspondence(plan))
    return PreparedBatch(np.stack(sa), np.stack(sb), np.stack(ca), np.stack(cb), ra, rb, plans, corrs)


def compute_losses(
    st: StudentTeacher,
    batch: PreparedBatch,
    toggles: LossToggles = LossToggles(),
    weights: dict | None = None,
) -> LossBundle:
    """Both symmetric passes: student(x)/teacher(x') and student(x')/teacher(x)."""
    student, teacher = st.student, st.teacher
    p = next(student.parameters())
    m = student.config.patch_size
    B = len(batch)
    as_t = lambda a: torch.as_tensor(a, dtype=p.dtype, device=p.device)  # noqa: E731

    need_heads = toggles.order or toggles.restore
    need_exp = toggles.global_c or toggles.local_c
    if not (need_heads or need_exp):
        return total_loss({}, toggles, weights)

    s_out = student(as_t(np.concatenate([batch.student_a, batch.student_b])), heads=need_heads, expanders=need_exp)
    comps = {}
    records = batch.records_a + batch.records_b
    if toggles.order:
        targets = np.stack([r.permutation for r in records])
        # both passes are student passes; each contributes its own batch mean
        comps["order"] = order_loss(s_out.order_logits[:B], targets[:B]) + order_loss(s_out.order_logits[B:], targets[B:])
    if toggles.restore:
        orig = as_t(np.stack([patchify(r.original_crop, m) for r in records]))
        comps["restore"] = restore_loss(s_out.restored[:B], orig[:B]) + restore_loss(s_out.restored[B:], orig[B:])
    if need_exp:
        with torch.no_grad():
            t_out = teacher(as_t(np.concatenate([batch.clean_b, batch.clean_a])), heads=False)
        if toggles.global_c:
            comps["global_c"] = (
                global_consistency_loss(s_out.global_embed[:B], t_out.global_embed[:B])
                + global_consistency_loss(s_out.global_embed[B:], t_out.global_embed[B:])
            )
        if toggles.local_c:
            idx_a = [c.index_a for c in batch.correspondences]
            idx_b = [c.index_b for c in batch.correspondences]
            ind_a = [r.indicator for r in batch.records_a]
            ind_b = [r.indicator for r in batch.records_b]
            comps["local_c"] = (
                local_consistency_loss(s_out.local_embeds[:B], t_out.local_embeds[:B], idx_a, idx_b, ind_a)
                + local_consistency_loss(s_out.local_embeds[B:], t_out.local_embeds[B:], idx_b, idx_a, ind_b)
            )
    return total_loss(comps, toggles, weights)


# --------------------------------------------------------------------------
# state

class TrainState:
    def __init__(self, config: TrainConfig, n_images: int, dtype=torch.float32):
        self.config = config
        self.spec = config.grid_spec()
        self.n_images = n_images
        seqs = np.random.SeedSequence(config.seed).spawn(3)
        torch_seed = int(seqs[0].generate_state(1)[0])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(torch_seed)
            self.model = StudentTeacher(config.encoder_config(), config.ema_alpha).to(dtype)
        self.data_rng = np.random.default_rng(seqs[1])
        self.distort_rng = np.random.default_rng(seqs[2])
        self.optimizer = torch.optim.SGD(self.model.student.parameters(), lr=0.0, momentum=config.momentum)
        self.step = 0

    @property
    def steps_per_epoch(self) -> int:
        return self.config.steps_per_epoch(self.n_images)

    @property
    def total_steps(self) -> int:
        return self.config.total_steps(self.n_images)

    def batch_indices(self, step: int) -> np.ndarray:
        """Images for ``step``: a per-epoch permutation derived from (seed, epoch) only."""
        spe = self.steps_per_epoch
        epoch, pos = divmod(step, spe)
        perm = np.random.default_rng([self.config.seed, epoch]).permutation(self.n_images)
        bs = self.config.batch_size
        return perm[pos * bs : (pos + 1) * bs]


def train_step(state: TrainState, raw_images) -> LossBundle:
    cfg = state.config
    batch = prepare_batch(raw_images, state.spec, state.data_rng, state.distort_rng, cfg.distortion())
    lr = lr_schedule(state.step, cfg, state.steps_per_epoch, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    try:
        bundle = compute_losses(state.model, batch, cfg.toggles(), cfg.weights())
    except NonFiniteInputError as exc:
        raise NonFiniteLossError(state.step, {"order": float("nan")}) from exc
    if not bundle.is_finite():
        raise NonFiniteLossError(state.step, bundle.as_floats())
    state.optimizer.zero_grad(set_to_none=True)
    if bundle.total.requires_grad:
        bundle.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(state.model.student.parameters(), cfg.grad_clip)
        state.optimizer.step()
    state.model.ema_update()
    state.step += 1
    state.last_lr = lr
    return bundle


def log_record(step: int, lr: float, bundle: LossBundle) -> dict:
    return {"step": step, "lr": lr, **bundle.as_floats()}


def pretrain(
    config: TrainConfig,
    images,
    out_dir=None,
    state: TrainState | None = None,
    progress=None,
) -> tuple[TrainState, list[dict]]:
    """Train on a sequence of raw images; optionally checkpoint and log under ``out_dir``.

    Writes ``train_log.jsonl`` (one record per step) and ``ckpt_XXXXXX.npz``
    files at step 0, every ``checkpoint_every`` epochs, and at the end.
    """
    state = state or TrainState(config, len(images))
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(config))
        logf = open(out / "train_log.jsonl", "a")
        if state.step == 0:
            save_checkpoint(state, out / f"ckpt_{0:06d}.npz")
    history = []
    spe = state.steps_per_epoch
    try:
        while state.step < state.total_steps:
            idx = state.batch_indices(state.step)
            step = state.step
            bundle = train_step(state, [images[i] for i in idx])
            rec = log_record(step, state.last_lr, bundle)
            history.append(rec)
            if logf is not None:
                logf.write(json.dumps(rec) + "\n")
            if progress is not None:
                progress(rec)
            if out is not None and config.checkpoint_every and state.step % (spe * config.checkpoint_every) == 0:
                save_checkpoint(state, out / f"ckpt_{state.step:06d}.npz")
    finally:
        if logf is not None:
            logf.close()
    if out is not None:
        save_checkpoint(state, out / f"ckpt_{state.step:06d}.npz")
    return state, history


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "peac-checkpoint"


def _to_array(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_checkpoint(state: TrainState, path):
    """Write an ``.npz`` container: tensors as arrays plus one JSON metadata entry."""
    opt = state.optimizer.state_dict()
    arrays = {}
    for prefix, module in (("student", state.model.student), ("teacher", state.model.teacher)):
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = _to_array(t)
    opt_state = {}
    for idx, entry in opt["state"].items():
        keys = {}
        for key, val in entry.items():
            if isinstance(val, torch.Tensor):
                arrays[f"optimizer/{idx}/{key}"] = _to_array(val)
                keys[key] = "array"
            else:
                keys[key] = val
        opt_state[str(idx)] = keys
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "train_config": asdict(state.config),
        "n_images": state.n_images,
        "step": state.step,
        "optimizer": {"param_groups": opt["param_groups"], "state": opt_state},
        "rng": {"data": state.data_rng.bit_generator.state, "distort": state.distort_rng.bit_generator.state},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key, arr in sorted(arrays.items()):
            # fixed timestamp keeps the file a pure function of the state
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)


def _module_state(arrays, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: torch.from_numpy(arrays[k].copy()) for k in arrays.files if k.startswith(prefix + "/")}


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as arrays:
            meta = json.loads(arrays["meta"].tobytes().decode())
            student = _module_state(arrays, "student")
            teacher = _module_state(arrays, "teacher")
            buffers = _module_state(arrays, "optimizer")
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(meta, dict) or meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a PEAC checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} != supported version {CHECKPOINT_VERSION}"
        )
    config = TrainConfig(**meta["train_config"])
    state = TrainState(config, meta["n_images"], dtype=next(iter(student.values())).dtype)
    state.model.student.load_state_dict(student)
    state.model.teacher.load_state_dict(teacher)
    opt_state = {}
    for idx, entry in meta["optimizer"]["state"].items():
        opt_state[int(idx)] = {k: buffers[f"{idx}/{k}"] if v == "array" else v for k, v in entry.items()}
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["optimizer"]["param_groups"]})
    state.data_rng.bit_generator.state = meta["rng"]["data"]
    state.distort_rng.bit_generator.state = meta["rng"]["distort"]
    state.step = int(meta["step"])
    return state
