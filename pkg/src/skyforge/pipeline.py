"""Stage orchestration: config, derived seeds, artifact layout and the run ledger.

Stages run in a fixed linear order; each writes one directory under the run
root::

    <root>/dataset  scene  priors  codec  ldm  acm  vcm  outputs  reports
    <root>/ledger.jsonl

A stage is skipped as up-to-date when its config hash, its input hashes and
its current output hash all match its last ledger entry. While a stage runs,
an audit hook records every file it opens under the run root and rejects
reads outside its declared inputs.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

STAGES = [
    "gen-data", "fit-scene", "render-priors", "train-codec", "train-ldm",
    "train-acm", "train-vcm", "infer", "evaluate",
]  # fmt: skip

STAGE_DIRS = {
    "gen-data": "dataset",
    "fit-scene": "scene",
    "render-priors": "priors",
    "train-codec": "codec",
    "train-ldm": "ldm",
    "train-acm": "acm",
    "train-vcm": "vcm",
    "infer": "outputs",
    "evaluate": "reports",
}

STAGE_INPUTS = {
    "gen-data": [],
    "fit-scene": ["gen-data"],
    "render-priors": ["gen-data", "fit-scene"],
    "train-codec": ["gen-data"],
    "train-ldm": ["gen-data", "train-codec"],
    "train-acm": ["gen-data", "render-priors", "train-codec", "train-ldm"],
    "train-vcm": ["gen-data", "render-priors", "train-codec", "train-ldm", "train-acm"],
    "infer": ["gen-data", "render-priors", "train-codec", "train-ldm", "train-acm", "train-vcm"],
    "evaluate": ["gen-data", "infer"],
}

# config section per stage
STAGE_SECTIONS = {
    "gen-data": "data",
    "fit-scene": "fit",
    "render-priors": "priors",
    "train-codec": "codec",
    "train-ldm": "ldm",
    "train-acm": "acm",
    "train-vcm": "vcm",
    "infer": "infer",
    "evaluate": "evaluate",
}

DEFAULTS = {
    "data": {
        "scenes": 2,
        "buildings": 12,
        "bounds": [[-60.0, -60.0, 0.0], [60.0, 60.0, 40.0]],
        "lanes": None,
        "trajectory": {"width": 64, "height": 64},
    },
    "fit": {"scenes": ["scene_000"], "points": 1500, "config": {"iterations": 2000}},
    "priors": {"tile_size": 8},
    "codec": {},
    "ldm": {"net": {}, "schedule": {}, "train": {"steps": 3000, "batch_size": 16}},
    "acm": {"train": {"steps": 3000, "batch_size": 8}},
    "vcm": {"frames": 12, "train": {"steps": 1500, "batch_size": 2, "lr": 2e-3}},
    "infer": {
        "scene": "scene_000",
        "lanes": None,
        "frames": 12,
        "length": 12,
        "starts": [0],
        "stride": None,
        "seeds": [0],
        "steps": 50,
        "baseline": True,
    },
    "evaluate": {"extractor_seed": 0},
}


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class MissingInputError(PipelineError):
    exit_code = 3


class StaleInputError(PipelineError):
    exit_code = 3


class AuditError(PipelineError):
    exit_code = 3


class NumericalError(PipelineError):
    exit_code = 4


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k]:
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    root: Path
    seed: int = 0
    deterministic: bool = True
    sections: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> PipelineConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
        if "root" not in d:
            raise ConfigError("config needs an output 'root'")
        unknown = set(d) - {"schema_version", "root", "seed", "deterministic", *DEFAULTS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        root = Path(d["root"])
        if not root.is_absolute() and base_dir is not None:
            root = Path(base_dir) / root
        sections = {k: _merge(v, d.get(k) or {}) for k, v in DEFAULTS.items()}
        try:
            seed = int(d.get("seed", 0))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"seed: {e}") from None
        cfg = cls(root.resolve(), seed, bool(d.get("deterministic", True)), sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> PipelineConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "root": str(self.root), "seed": self.seed,
                "deterministic": self.deterministic, **self.sections}

    def validate(self) -> None:
        """Build every module config once so bad values fail before any stage runs."""
        from .diffusion.codec import CodecConfig
        from .diffusion.ldm import TrainConfig
        from .diffusion.schedule import NoiseSchedule
        from .diffusion.unet import UNetConfig
        from .sugar import FitConfig

        s = self.sections
        checks = [
            ("fit.config", lambda: FitConfig(**s["fit"]["config"])),
            ("codec", lambda: CodecConfig(**s["codec"])),
            ("ldm.net", lambda: UNetConfig(**s["ldm"]["net"])),
            ("ldm.schedule", lambda: NoiseSchedule(**s["ldm"]["schedule"])),
            ("ldm.train", lambda: TrainConfig(**s["ldm"]["train"])),
            ("acm.train", lambda: TrainConfig(**s["acm"]["train"])),
            ("vcm.train", lambda: TrainConfig(**s["vcm"]["train"])),
            ("data.trajectory", lambda: _trajectory(s["data"])),
        ]
        for name, build in checks:
            try:
                build()
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{name}: {e}") from None
        if int(s["data"]["scenes"]) < 2:
            raise ConfigError("data.scenes must be >= 2 (one scene is held out)")
        if int(s["vcm"]["frames"]) < 2 or int(s["infer"]["frames"]) < 2:
            raise ConfigError("frames must be >= 2")
        if int(s["infer"]["length"]) < 1 or not s["infer"]["seeds"]:
            raise ConfigError("infer needs length >= 1 and at least one seed")

    def stage_hash(self, stage: str) -> str:
        payload = {"schema_version": self.schema_version, "seed": self.seed, "deterministic": self.deterministic,
                   "stage": stage, "section": self.sections[STAGE_SECTIONS[stage]]}
        return _sha(json.dumps(payload, sort_keys=True).encode())

    def stage_dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]


def _trajectory(data: dict):
    from .dataset import TrajectorySpec

    return TrajectorySpec(**data.get("trajectory", {}))


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed mixed from the global seed and the stage name."""
    h = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# ---------------------------------------------------------------------------
# hashing and the ledger


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def hash_dir(path) -> str:
    """sha256 over sorted relative paths and file bytes."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        h.update(f.relative_to(path).as_posix().encode())
        h.update(b"\0")
        h.update(f.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


class RunLedger:
    """Append-only JSON-lines record of stage runs."""

    def __init__(self, path):
        self.path = Path(path)

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def append(self, entry: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps(entry, sort_keys=True)
        with open(self.path, "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    def latest(self, stage: str) -> dict | None:
        for e in reversed(self.entries()):
            if e["stage"] == stage and e["status"] in ("ok", "up-to-date"):
                return e
        return None


# ---------------------------------------------------------------------------
# read audit


_AUDIT: dict | None = None
_HOOKED = False


def _audit_hook(event, args):
    a = _AUDIT
    if a is None or event != "open" or not args:
        return
    p = args[0]
    if isinstance(p, int):
        return
    mode = args[1] if len(args) > 1 and isinstance(args[1], str) else "r"
    flags = args[2] if len(args) > 2 and isinstance(args[2], int) else 0
    if isinstance(mode, str) and any(c in mode for c in "wax+"):
        return
    if flags & (os.O_WRONLY | os.O_RDWR | os.O_CREAT):
        return
    try:
        path = os.path.realpath(os.fsdecode(p))
    except (TypeError, ValueError):
        return
    if not path.startswith(a["root"]):
        return
    if not any(path == d or path.startswith(d + os.sep) for d in a["allowed"]):
        a["violations"].append(path)


@contextlib.contextmanager
def read_audit(root: Path, allowed: list[Path]):
    global _AUDIT, _HOOKED
    if not _HOOKED:
        sys.addaudithook(_audit_hook)
        _HOOKED = True
    state = {"root": os.path.realpath(root), "allowed": [os.path.realpath(p) for p in allowed], "violations": []}
    _AUDIT = state
    try:
        yield state
    finally:
        _AUDIT = None


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded, deterministic torch kernels and flushed denormals."""
    np.finfo(np.float32), np.finfo(np.float64)  # cache limits before flushing denormals
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_flush = sys.float_info.min / 2 == 0.0  # FTZ/DAZ is process-wide CPU state
    torch.set_flush_denormal(True)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(prev_flush)
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


# ---------------------------------------------------------------------------
# stage running


@dataclass
class StageContext:
    cfg: PipelineConfig
    stage: str
    seed: int
    out: Path  # temporary output directory, renamed into place on success

    def input_dir(self, stage: str) -> Path:
        return self.cfg.stage_dir(stage)

    @property
    def section(self) -> dict:
        return self.cfg.sections[STAGE_SECTIONS[self.stage]]


@dataclass
class StageResult:
    stage: str
    status: str
    entry: dict


def check_inputs(cfg: PipelineConfig, stage: str, ledger: RunLedger) -> dict[str, str]:
    """Input hashes of ``stage``; raises if a prerequisite is missing or changed since it was recorded."""
    missing = [s for s in STAGE_INPUTS[stage] if ledger.latest(s) is None or not cfg.stage_dir(s).is_dir()]
    if missing:
        raise MissingInputError(
            f"{stage} needs the output of {missing[-1]}; run `skyforge {missing[-1]} --config ...` first"
            + (f" (missing: {', '.join(missing)})" if len(missing) > 1 else "")
        )
    hashes = {}
    for s in STAGE_INPUTS[stage]:
        cur = hash_dir(cfg.stage_dir(s))
        rec = ledger.latest(s)["output_hash"]
        if cur != rec:
            raise StaleInputError(f"{STAGE_DIRS[s]}/ changed since {s} last ran; re-run {s}")
        hashes[s] = cur
    return hashes


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> StageResult:
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}; expected one of {STAGES}")
    ledger = RunLedger(cfg.root / "ledger.jsonl")
    inputs = check_inputs(cfg, name, ledger)
    cfg_hash = cfg.stage_hash(name)
    out_dir = cfg.stage_dir(name)
    prev = ledger.latest(name)
    if (not force and prev is not None and prev["config_hash"] == cfg_hash and prev["input_hashes"] == inputs
            and out_dir.is_dir() and hash_dir(out_dir) == prev["output_hash"]):
        entry = {**prev, "status": "up-to-date", "wall_time_s": 0.0}
        ledger.append(entry)
        log.info("%s: up-to-date", name)
        return StageResult(name, "up-to-date", entry)

    seed = stage_seed(cfg.seed, name)
    tmp = cfg.root / f".tmp-{STAGE_DIRS[name]}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    ctx = StageContext(cfg, name, seed, tmp)
    allowed = [cfg.stage_dir(s) for s in STAGE_INPUTS[name]] + [tmp]
    t0 = time.perf_counter()
    from .diffusion.codec import TrainingDivergedError
    from .sugar import FitDivergedError

    try:
        with deterministic_mode(cfg.deterministic), read_audit(cfg.root, allowed) as audit:
            STAGE_FUNCS[name](ctx)
    except (FitDivergedError, TrainingDivergedError, FloatingPointError) as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise NumericalError(f"{name}: {e}") from e
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if audit["violations"]:
        shutil.rmtree(tmp, ignore_errors=True)
        raise AuditError(f"{name} read undeclared inputs: {sorted(set(audit['violations']))[:5]}")
    wall = time.perf_counter() - t0
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)
    entry = {
        "stage": name,
        "status": "ok",
        "config_hash": cfg_hash,
        "input_hashes": inputs,
        "output_hash": hash_dir(out_dir),
        "seed": seed,
        "wall_time_s": round(wall, 3),
    }
    ledger.append(entry)
    log.info("%s: ok in %.1fs", name, wall)
    return StageResult(name, "ok", entry)


def run_all(cfg: PipelineConfig, force: bool = False) -> list[StageResult]:
    return [run_stage(s, cfg, force=force) for s in STAGES]


# ---------------------------------------------------------------------------
# shared loaders


def load_manifest(ctx: StageContext):
    from .dataset import DatasetManifest

    return DatasetManifest.load(ctx.input_dir("gen-data"))


def fitted_scene_ids(priors_dir: Path) -> list[str]:
    return sorted(p.name for p in priors_dir.iterdir() if p.is_dir())


def render_priors(scene, manifest, scene_id: str, out_dir, tile_size: int = 8) -> list[dict]:
    """Render one prior per ground pose of every lane; files mirror the ground-image names.

    Writes ``<out_dir>/<lane>/NNNN.png`` and returns index entries pairing
    each prior with its ground image and pose.
    """
    from .dataset import save_png
    from .splat import render_prior

    out_dir = Path(out_dir)
    entries = []
    for lane in manifest.lanes(scene_id):
        recs = lane["records"]
        (out_dir / lane["lane_id"]).mkdir(parents=True, exist_ok=True)
        written = 0
        for r in recs:
            p = render_prior(scene, r.ground_pose, index=r.index, tile_size=tile_size)
            rel = f"{lane['lane_id']}/{Path(r.ground_image).name}"
            save_png(out_dir / rel, p.rgb)
            entries.append({"lane_id": lane["lane_id"], "index": r.index, "prior": rel,
                            "ground_image": r.ground_image, "ground_pose": r.ground_pose.to_dict()})
            written += 1
        if written != len(recs):
            raise ValueError(f"{scene_id}/{lane['lane_id']}: {written} priors for {len(recs)} ground poses")
    return entries


def load_priors(priors_dir, manifest, scene_id: str, lane_id: str) -> np.ndarray:
    """Priors of one lane, index-aligned with the manifest's ground images."""
    from .dataset import load_png

    d = Path(priors_dir) / scene_id
    index = json.loads((d / "index.json").read_text())
    recs = manifest.records(scene_id, lane_id)
    items = sorted((e for e in index if e["lane_id"] == lane_id), key=lambda e: e["index"])
    if len(items) != len(recs):
        raise ValueError(f"{scene_id}/{lane_id}: {len(items)} priors for {len(recs)} ground poses")
    for e, r in zip(items, recs):
        if e["ground_image"] != r.ground_image:
            raise ValueError(f"prior {e['prior']} is not aligned with {r.ground_image}")
    return np.stack([load_png(d / e["prior"]) for e in items])


def ground_images(manifest, scene_id: str, lane_id: str | None = None) -> np.ndarray:
    return np.stack([manifest.load_image(r.ground_image) for r in manifest.records(scene_id, lane_id)])


def _encode(codec, images, batch: int = 64) -> torch.Tensor:
    return torch.cat([codec.encode_np(images[i : i + batch]) for i in range(0, len(images), batch)])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _load_models(ctx: StageContext, upto: str):
    from .control import ControlBranch
    from .consistency import ConsistencyNet
    from .diffusion.codec import LatentCodec
    from .diffusion.ldm import load_denoiser

    codec = LatentCodec.load(ctx.input_dir("train-codec") / "codec.skyw")
    base, prompt, schedule, _ = load_denoiser(ctx.input_dir("train-ldm") / "denoiser.skyw")
    out = {"codec": codec, "base": base, "prompt": prompt, "schedule": schedule}
    if upto in ("train-acm", "train-vcm"):
        out["branch"] = ControlBranch.load(ctx.input_dir("train-acm") / "control.skyw")
    if upto == "train-vcm":
        out["vcm"] = ConsistencyNet.load(ctx.input_dir("train-vcm") / "consistency.skyw")
    for m in out.values():
        if isinstance(m, torch.nn.Module):
            m.eval()
    return out


def _train_cfg(section: dict, seed: int):
    from .diffusion.ldm import TrainConfig

    return TrainConfig(**{**section, "seed": seed})


# ---------------------------------------------------------------------------
# stage bodies


def _stage_gen_data(ctx: StageContext) -> None:
    from .dataset import generate_dataset

    d = ctx.section
    lanes = tuple(d["lanes"]) if d.get("lanes") else None
    bounds = tuple(tuple(map(float, b)) for b in d["bounds"])
    generate_dataset(ctx.seed, int(d["scenes"]), int(d["buildings"]), ctx.out, spec=_trajectory(d),
                     bounds=bounds, lane_ids=lanes, force=True)


def _stage_fit_scene(ctx: StageContext) -> None:
    from .sugar import FitConfig, fit_scene, init_from_depth

    manifest = load_manifest(ctx)
    d = ctx.section
    for i, scene_id in enumerate(d["scenes"]):
        if scene_id not in manifest.scene_ids():
            raise ConfigError(f"fit.scenes: unknown scene {scene_id!r}")
        seed = ctx.seed + i
        init = init_from_depth(manifest, int(d["points"]), seed=seed, scene_id=scene_id)
        fit_cfg = FitConfig(**{**d["config"], "seed": seed})
        scene, report = fit_scene(manifest, init, fit_cfg, scene_id=scene_id)
        scene.save(ctx.out / f"{scene_id}.bin")
        report.save(ctx.out / f"{scene_id}_report.json")


def _stage_render_priors(ctx: StageContext) -> None:
    from .gaussians import SceneModel

    manifest = load_manifest(ctx)
    for path in sorted(ctx.input_dir("fit-scene").glob("*.bin")):
        scene_id = path.stem
        scene = SceneModel.load(path)
        entries = render_priors(scene, manifest, scene_id, ctx.out / scene_id, tile_size=int(ctx.section["tile_size"]))
        _write_json(ctx.out / scene_id / "index.json", entries)


def _stage_train_codec(ctx: StageContext) -> None:
    from .diffusion.codec import CodecConfig, train_codec

    manifest = load_manifest(ctx)
    train = np.concatenate([ground_images(manifest, s) for s in manifest.scene_ids("train")])
    hold = np.concatenate([ground_images(manifest, s) for s in manifest.scene_ids("test")])
    codec, rep = train_codec(train, CodecConfig(**{**ctx.section, "seed": ctx.seed}), holdout=hold)
    codec.save(ctx.out / "codec.skyw")
    _write_json(ctx.out / "report.json", {**asdict(rep), "losses": rep.losses[-100:]})


def _stage_train_ldm(ctx: StageContext) -> None:
    from .diffusion.codec import LatentCodec
    from .diffusion.ldm import save_denoiser, train_ldm
    from .diffusion.schedule import NoiseSchedule
    from .diffusion.unet import UNetConfig

    manifest = load_manifest(ctx)
    codec = LatentCodec.load(ctx.input_dir("train-codec") / "codec.skyw").eval()
    imgs = np.concatenate([ground_images(manifest, s) for s in manifest.scene_ids("train")])
    latents = _encode(codec, imgs)
    d = ctx.section
    schedule = NoiseSchedule(**d["schedule"])
    net_cfg = UNetConfig(**{"in_channels": latents.shape[1], **d["net"]})
    net, prompt, logs = train_ldm(latents, schedule, net_cfg, _train_cfg(d["train"], ctx.seed))
    save_denoiser(ctx.out / "denoiser.skyw", net, prompt, schedule)
    _write_json(ctx.out / "log.json", {"losses": logs.losses, "n_latents": len(latents)})


def _acm_pairs(ctx: StageContext, manifest, codec):
    priors, imgs = [], []
    pdir = ctx.input_dir("render-priors")
    for scene_id in fitted_scene_ids(pdir):
        for lane in manifest.lanes(scene_id):
            priors.append(load_priors(pdir, manifest, scene_id, lane["lane_id"]))
            imgs.append(ground_images(manifest, scene_id, lane["lane_id"]))
    if not priors:
        raise MissingInputError("no rendered priors; run render-priors first")
    from .control import images_to_tensor

    return images_to_tensor(np.concatenate(priors)), _encode(codec, np.concatenate(imgs))


def _stage_train_acm(ctx: StageContext) -> None:
    from .control import control_eval_loss, train_acm
    from .diffusion.weights import module_checksum

    manifest = load_manifest(ctx)
    m = _load_models(ctx, "train-ldm")
    priors, latents = _acm_pairs(ctx, manifest, m["codec"])
    before = module_checksum(m["base"])
    branch, logs = train_acm(priors, latents, m["base"], m["prompt"], m["schedule"],
                             _train_cfg(ctx.section["train"], ctx.seed), factor=m["codec"].factor)
    branch.eval()
    g = torch.Generator().manual_seed(ctx.seed)
    shuffled = priors[torch.randperm(len(priors), generator=g)]
    probe = {
        "matched": control_eval_loss(branch, m["base"], m["prompt"], m["schedule"], priors, latents, ctx.seed),
        "shuffled": control_eval_loss(branch, m["base"], m["prompt"], m["schedule"], shuffled, latents, ctx.seed),
    }
    branch.save(ctx.out / "control.skyw")
    _write_json(ctx.out / "log.json", {"losses": logs.losses, "base_checksum_before": before,
                                       "base_checksum_after": module_checksum(m["base"]), "probe": probe})


def _stage_train_vcm(ctx: StageContext) -> None:
    from .consistency import LatentSequence, train_vcm
    from .control import images_to_tensor
    from .diffusion.weights import module_checksum

    manifest = load_manifest(ctx)
    m = _load_models(ctx, "train-acm")
    pdir = ctx.input_dir("render-priors")
    seqs = []
    for scene_id in fitted_scene_ids(pdir):
        for lane in manifest.lanes(scene_id):
            pri = load_priors(pdir, manifest, scene_id, lane["lane_id"])
            lat = _encode(m["codec"], ground_images(manifest, scene_id, lane["lane_id"]))
            seqs.append(LatentSequence(lat, images_to_tensor(pri)))
    sums = {k: module_checksum(m[k]) for k in ("base", "branch")}
    net, logs = train_vcm(seqs, m["base"], m["branch"], m["prompt"], m["schedule"], int(ctx.section["frames"]),
                          _train_cfg(ctx.section["train"], ctx.seed))
    net.save(ctx.out / "consistency.skyw")
    after = {k: module_checksum(m[k]) for k in ("base", "branch")}
    _write_json(ctx.out / "log.json", {"losses": logs.losses, "frame1_intact": all(logs.frame1_intact),
                                       "checksums_before": sums, "checksums_after": after})


def _stage_infer(ctx: StageContext) -> None:
    from .consistency import generate_long, generate_per_frame

    manifest = load_manifest(ctx)
    m = _load_models(ctx, "train-vcm")
    d = ctx.section
    scene_id = d["scene"]
    lanes = d["lanes"] or [lane["lane_id"] for lane in manifest.lanes(scene_id)]
    for lane_id in lanes:
        priors = load_priors(ctx.input_dir("render-priors"), manifest, scene_id, lane_id)
        recs = manifest.records(scene_id, lane_id)
        starts = d["starts"]
        if d.get("stride"):
            starts = range(0, len(priors) - int(d["length"]) + 1, int(d["stride"]))
        for start in starts:
            stop = min(int(start) + int(d["length"]), len(priors))
            for seed in d["seeds"]:
                seq_dir = ctx.out / f"{scene_id}_{lane_id}_{int(start):04d}" / f"seed_{int(seed)}"
                long = generate_long(priors[start:stop], int(d["frames"]), m["vcm"], m["branch"], m["base"],
                                     m["prompt"], m["codec"], m["schedule"], seed=int(seed), steps=int(d["steps"]))
                _save_frames(seq_dir / "vcm", long.frames)
                if d.get("baseline", True):
                    base = generate_per_frame(priors[start:stop], m["branch"], m["base"], m["prompt"], m["codec"],
                                              m["schedule"], seed=int(seed), steps=int(d["steps"]))
                    _save_frames(seq_dir / "acm", base)
                _write_json(seq_dir / "sequence.json", {
                    "scene_id": scene_id, "lane_id": lane_id, "seed": int(seed), "window": int(d["frames"]),
                    "windows": long.windows, "ground_images": [r.ground_image for r in recs[start:stop]],
                    "ground_poses": [r.ground_pose.to_dict() for r in recs[start:stop]],
                })  # fmt: skip


def _save_frames(d: Path, frames) -> None:
    from .dataset import save_png

    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        save_png(d / f"{i:04d}.png", f)


def _stage_evaluate(ctx: StageContext) -> None:
    from .dataset import load_png
    from .metrics import FeatureExtractor, adjacent_frame_distance, evaluate_sequences

    manifest = load_manifest(ctx)
    seed = int(ctx.section["extractor_seed"])
    ex = FeatureExtractor(seed)
    out_root = ctx.input_dir("infer")
    per_method: dict[str, dict[str, dict]] = {}
    gt_by_seq = {}
    for seq_json in sorted(out_root.glob("*/seed_*/sequence.json")):
        info = json.loads(seq_json.read_text())
        key = seq_json.parent.parent.name
        if key not in gt_by_seq:
            gt_by_seq[key] = np.stack([manifest.load_image(p) for p in info["ground_images"]])
        for method_dir in sorted(p for p in seq_json.parent.iterdir() if p.is_dir()):
            frames = np.stack([load_png(f) for f in sorted(method_dir.glob("*.png"))])
            per_method.setdefault(method_dir.name, {}).setdefault(seq_json.parent.name, {})[key] = frames
    if not per_method:
        raise MissingInputError("no generated sequences found; run infer first")
    report = {"extractor_seed": seed, "methods": {}}
    for method, by_seed in sorted(per_method.items()):
        report["methods"][method] = {}
        for seed_name, seqs in sorted(by_seed.items()):
            rep = evaluate_sequences(seqs, {k: gt_by_seq[k] for k in seqs}, seed=seed)
            body = json.loads(rep.to_json())
            body["aggregate"]["adjacent_frame_distance"] = adjacent_frame_distance(list(seqs.values()), ex)
            report["methods"][method][seed_name] = body
    _write_json(ctx.out / "report.json", report)


STAGE_FUNCS = {
    "gen-data": _stage_gen_data,
    "fit-scene": _stage_fit_scene,
    "render-priors": _stage_render_priors,
    "train-codec": _stage_train_codec,
    "train-ldm": _stage_train_ldm,
    "train-acm": _stage_train_acm,
    "train-vcm": _stage_train_vcm,
    "infer": _stage_infer,
    "evaluate": _stage_evaluate,
}
