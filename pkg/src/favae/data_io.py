"""On-disk formats: matrix files, dataset manifests, checkpoints, synthetic data.

Matrix files (``.favm``) hold one float64 matrix::

    offset  size  field
    0       4     magic b"FAVM"
    4       2     format version (u16, little-endian, currently 1)
    6       2     reserved (u16, zero)
    8       4     rows (u32, little-endian)
    12      4     cols (u32, little-endian)
    16      8*r*c row-major little-endian float64 values

Manifests and checkpoint metadata are JSON documents; every binary blob a
checkpoint references carries a 64-bit BLAKE2b checksum.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import struct
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .dataset import Dataset, ViewData
from .errors import (ChecksumError, DimensionError, FormatError, HashMismatchError, MaskError,
                     StructuralError, UnknownKindError, VersionError)
from .fa_core import ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior, ProjectionPosterior
from .model import FAVAE
from .neural import AdamState, Dense, VaeNet
from .views import FrozenLatentView, MultilabelView, RealView, VaeView, ViewKind

MAGIC = b"FAVM"
MATRIX_VERSION = 1
HEADER = struct.Struct("<4sHHII")
MANIFEST_FORMAT = "favae-manifest"
CHECKPOINT_FORMAT = "favae-checkpoint"
CHECKPOINT_VERSION = "1.0"
CHECKPOINT_META = "checkpoint.json"


# ---------------------------------------------------------------------------
# Matrix files
# ---------------------------------------------------------------------------

def matrix_bytes(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise StructuralError(f"matrix files hold 2-D arrays, got shape {a.shape}")
    return HEADER.pack(MAGIC, MATRIX_VERSION, 0, a.shape[0], a.shape[1]) + \
        np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_matrix(path, a: np.ndarray) -> None:
    Path(path).write_bytes(matrix_bytes(a))


def parse_matrix(raw: bytes, what: str = "matrix") -> np.ndarray:
    if len(raw) < HEADER.size:
        raise DimensionError(f"{what}: file shorter than the {HEADER.size}-byte header")
    magic, version, _, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise VersionError(f"{what}: matrix format version {version} unsupported")
    body = raw[HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise DimensionError(f"{what}: header declares {rows}x{cols} but holds {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def read_matrix(path, what: Optional[str] = None) -> np.ndarray:
    return parse_matrix(Path(path).read_bytes(), what or str(path))


def checksum(raw: bytes) -> str:
    return hashlib.blake2b(raw, digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestView:
    name: str
    kind: str
    dims: List[int]
    path: str
    mask_path: Optional[str] = None


@dataclass
class DatasetManifest:
    views: List[ManifestView]
    n_samples: int
    content_hash: str

    def to_json(self) -> str:
        doc = {"format": MANIFEST_FORMAT, "version": 1, "n_samples": self.n_samples,
               "content_hash": self.content_hash, "views": [asdict(v) for v in self.views]}
        return json.dumps(doc, indent=2) + "\n"


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write every view as a matrix file plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.views:
        path = f"{v.name}.favm"
        write_matrix(out / path, v.values)
        mask_path = None
        if v.mask is not None:
            mask_path = f"{v.name}.mask.favm"
            m = v.mask.astype(float)
            write_matrix(out / mask_path, m[:, None] if m.ndim == 1 else m)
        entries.append(ManifestView(v.name, v.kind.value, list(v.values.shape), path, mask_path))
    manifest = DatasetManifest(entries, dataset.n, dataset.content_hash())
    target = out / "manifest.json"
    target.write_text(manifest.to_json())
    return target


def load_manifest(path) -> Tuple[DatasetManifest, Dataset]:
    """Load a manifest and its matrices, validating dimensions, masks and the content hash."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a dataset manifest")
    root = path.parent
    entries, views = [], []
    n = int(doc["n_samples"])
    for raw in doc["views"]:
        entry = ManifestView(**raw)
        try:
            kind = ViewKind(entry.kind)
        except ValueError:
            raise UnknownKindError(f"view {entry.name!r}: unknown kind {entry.kind!r}") from None
        values = read_matrix(root / entry.path, f"view {entry.name!r}")
        if list(values.shape) != list(entry.dims) or values.shape[0] != n:
            raise DimensionError(f"view {entry.name!r}: file is {values.shape}, manifest declares "
                                 f"{tuple(entry.dims)} with n_samples={n}")
        mask = None
        if entry.mask_path:
            m = read_matrix(root / entry.mask_path, f"mask of view {entry.name!r}")
            if not np.all(np.isin(m, (0.0, 1.0))):
                raise MaskError(f"view {entry.name!r}: mask values must be 0 or 1")
            if m.shape == (n, 1):
                mask = m[:, 0]
            elif m.shape == values.shape:
                mask = m
            else:
                raise DimensionError(f"view {entry.name!r}: mask shape {m.shape} fits neither "
                                     f"({n}, 1) nor {values.shape}")
        entries.append(entry)
        views.append(ViewData(entry.name, kind, values, mask))
    dataset = Dataset(views)
    manifest = DatasetManifest(entries, n, doc["content_hash"])
    actual = dataset.content_hash()
    if actual != manifest.content_hash:
        raise HashMismatchError(f"{path}: content hash {actual} does not match manifest {manifest.content_hash}")
    return manifest, dataset


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthView:
    name: str
    kind: str = "real"
    d: int = 10
    noise_tau: float = 100.0
    shared_factors: List[int] = field(default_factory=list)
    private_factors: List[int] = field(default_factory=list)
    latent_dim: int = 8
    hidden: int = 32
    missing_rate: float = 0.0

    @property
    def factors(self) -> List[int]:
        return sorted(set(self.shared_factors) | set(self.private_factors))


@dataclass
class SynthSpec:
    """Multi-view synthetic data with known latent structure (factor indices are 1-based).

    View kinds: ``real`` (linear-Gaussian), ``multilabel`` (Bernoulli of a
    linear logit) and ``image`` (a fixed random two-layer tanh network of a
    linear code, plus Gaussian noise; modeled by a VAE view).
    """

    n: int
    k_true: int
    views: List[SynthView]
    seed: int = 0

    def __post_init__(self):
        self.views = [v if isinstance(v, SynthView) else SynthView(**v) for v in self.views]
        validate_synth_spec(self)


def validate_synth_spec(spec: SynthSpec):
    if spec.n < 1 or spec.k_true < 1:
        raise StructuralError("n and k_true must be positive")
    names = [v.name for v in spec.views]
    if len(set(names)) != len(names) or not names:
        raise StructuralError("views must have unique names and at least one view is required")
    for i, v in enumerate(spec.views):
        where = f"views[{i}]"
        if v.kind not in ("real", "multilabel", "image"):
            raise StructuralError(f"{where}.kind: unknown kind {v.kind!r}")
        if v.d < 1:
            raise StructuralError(f"{where}.d must be positive")
        if not v.noise_tau > 0:
            raise StructuralError(f"{where}.noise_tau must be positive")
        if not 0 <= v.missing_rate < 1:
            raise StructuralError(f"{where}.missing_rate must be in [0, 1)")
        for key in ("shared_factors", "private_factors"):
            for j, f in enumerate(getattr(v, key)):
                if not 1 <= f <= spec.k_true:
                    raise StructuralError(f"{where}.{key}[{j}]: factor {f} outside 1..{spec.k_true}")
        if not v.factors:
            raise StructuralError(f"{where}: needs at least one factor")


@dataclass
class GroundTruth:
    z: np.ndarray
    w: Dict[str, np.ndarray]
    tau: Dict[str, float]
    clean: Dict[str, np.ndarray]


def generate_synthetic(spec: SynthSpec, out_dir=None) -> Tuple[Dataset, GroundTruth]:
    """Draw a dataset from ``spec``; with ``out_dir`` also write it (and the truth) to disk."""
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal((spec.n, spec.k_true))
    views, ws, taus, clean = [], {}, {}, {}
    for v in spec.views:
        cols = np.array(v.factors) - 1
        rows = v.d if v.kind != "image" else v.latent_dim
        w = np.zeros((rows, spec.k_true))
        w[:, cols] = rng.standard_normal((rows, cols.size))
        lin = z @ w.T
        noise_sd = 0.0 if np.isinf(v.noise_tau) else 1.0 / np.sqrt(v.noise_tau)
        if v.kind == "real":
            signal = lin
            values = lin + noise_sd * rng.standard_normal(lin.shape)
            kind = ViewKind.REAL
        elif v.kind == "multilabel":
            signal = expit(lin)
            values = (rng.random(lin.shape) < signal).astype(float)
            kind = ViewKind.MULTILABEL
        else:
            a1 = rng.standard_normal((v.latent_dim, v.hidden)) / np.sqrt(v.latent_dim * cols.size)
            a2 = rng.standard_normal((v.hidden, v.d)) * 1.5 / np.sqrt(v.hidden)
            b2 = 0.3 * rng.standard_normal(v.d)
            signal = np.tanh(np.tanh(lin @ a1) @ a2 + b2)
            values = signal + noise_sd * rng.standard_normal(signal.shape)
            kind = ViewKind.VAE
        mask = None
        if v.missing_rate > 0:
            mask = rng.random(spec.n) >= v.missing_rate
            values = np.where(mask[:, None], values, 0.0)
        views.append(ViewData(v.name, kind, values, mask))
        ws[v.name], taus[v.name], clean[v.name] = w, float(v.noise_tau), signal
    dataset = Dataset(views)
    truth = GroundTruth(z, ws, taus, clean)
    if out_dir is not None:
        out = Path(out_dir)
        write_dataset(dataset, out)
        tdir = out / "truth"
        tdir.mkdir(exist_ok=True)
        write_matrix(tdir / "z.favm", z)
        for name in ws:
            write_matrix(tdir / f"{name}.w.favm", ws[name])
        (tdir / "tau.json").write_text(json.dumps(
            {k: (None if np.isinf(t) else t) for k, t in taus.items()}, indent=2) + "\n")
    return dataset, truth


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class _BlobWriter:
    def __init__(self, root: Path):
        self.root = root
        self.sums: Dict[str, str] = {}
        (root / "blobs").mkdir()

    def put(self, name: str, a) -> dict:
        a = np.asarray(a, dtype=float)
        shape = list(a.shape)
        flat = a.reshape(1, -1) if a.ndim < 2 else a.reshape(-1, a.shape[-1])
        raw = matrix_bytes(flat)
        rel = f"blobs/{name}.favm"
        (self.root / rel).write_bytes(raw)
        self.sums[rel] = checksum(raw)
        return {"blob": rel, "shape": shape}


class _BlobReader:
    def __init__(self, root: Path, sums: Dict[str, str]):
        self.root = root
        self.sums = sums

    def get(self, ref: dict) -> np.ndarray:
        rel = ref["blob"]
        path = self.root / rel
        if rel not in self.sums:
            raise FormatError(f"blob {rel} is not listed in the checkpoint")
        if not path.exists():
            raise FormatError(f"missing blob {rel}")
        raw = path.read_bytes()
        if checksum(raw) != self.sums[rel]:
            raise ChecksumError(f"checksum mismatch for {rel}")
        return parse_matrix(raw, rel).reshape(ref["shape"])


def _net_meta(net: VaeNet, put, prefix: str) -> dict:
    def layers(ls, part):
        return [{"activation": l.activation, "weight": put(f"{prefix}.{part}{i}.weight", l.weight),
                 "bias": put(f"{prefix}.{part}{i}.bias", l.bias)} for i, l in enumerate(ls)]
    return {"latent_dim": net.latent_dim, "beta": net.beta, "decoder_sigma": net.decoder_sigma,
            "encoder": layers(net.encoder, "enc"), "decoder": layers(net.decoder, "dec")}


def _net_from_meta(meta: dict, get) -> VaeNet:
    def layers(ls):
        return [Dense(get(l["weight"]), get(l["bias"]), l["activation"]) for l in ls]
    return VaeNet(layers(meta["encoder"]), layers(meta["decoder"]), meta["latent_dim"], meta["beta"],
                  meta["decoder_sigma"])


def save_checkpoint(model: FAVAE, trace, out_dir, config=None) -> Path:
    """Write the complete model state to ``out_dir`` atomically."""
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        blobs = _BlobWriter(tmp)
        put = blobs.put
        z = model.z
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyperparams": asdict(model.hp),
            "n": model.n,
            "seed": model.seed,
            "iteration": model.iteration,
            "converged": model.converged,
            "data_hash": model.data_hash,
            "rng_state": model.rng.bit_generator.state,
            "z": {"mean": put("z.mean", z.mean), "covs": put("z.covs", z.covs), "group": put("z.group", z.group),
                  "patterns": None if z.patterns is None else [list(p) for p in z.patterns]},
            "views": [],
        }
        for i, (name, v) in enumerate(model.views.items()):
            p = f"view{i}"
            vm = {"name": name, "kind": v.kind.value, "mask": put(f"{p}.mask", v.mask),
                  "entry_mask": None if v.entry_mask is None else put(f"{p}.entry_mask", v.entry_mask),
                  "x": put(f"{p}.x", v.x), "x_var": None if v.x_var is None else put(f"{p}.x_var", v.x_var),
                  "w": {"mean": put(f"{p}.w.mean", v.w.mean), "cov": put(f"{p}.w.cov", v.w.cov)},
                  "alpha": {"a": float(v.alpha.a), "b": put(f"{p}.alpha.b", v.alpha.b)},
                  "tau": None if v.tau is None else {"a": float(v.tau.a), "b": float(v.tau.b)}}
            if isinstance(v, MultilabelView):
                vm["labels"] = put(f"{p}.labels", v.labels)
                vm["xi"] = put(f"{p}.xi", v.xi)
            if isinstance(v, VaeView):
                ad = v.adam
                vm["frozen"] = v.frozen
                vm["prior_mode"] = v.prior_mode
                vm["pseudo_obs_mode"] = v.pseudo_obs_mode
                vm["adam"] = {"learning_rate": ad.learning_rate, "beta1": ad.beta1, "beta2": ad.beta2,
                              "eps": ad.eps, "step": ad.step,
                              "m": None if ad.m is None else [put(f"{p}.adam.m{j}", a) for j, a in enumerate(ad.m)],
                              "v": None if ad.v is None else [put(f"{p}.adam.v{j}", a) for j, a in enumerate(ad.v)]}
            net = getattr(v, "net", None)
            vm["net"] = None if net is None else _net_meta(net, put, f"{p}.net")
            meta["views"].append(vm)
        meta["trace"] = [] if trace is None else [json.loads(line) for line in trace.to_lines()]
        meta["config"] = config.to_dict() if hasattr(config, "to_dict") else config
        meta["blobs"] = blobs.sums
        (tmp / CHECKPOINT_META).write_text(json.dumps(meta, indent=1) + "\n")
        if out.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old.", dir=out.parent))
            os.rename(out, old / "ckpt")
            os.rename(tmp, out)
            shutil.rmtree(old)
        else:
            os.rename(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def _check_version(version: str):
    try:
        major, minor = (int(x) for x in str(version).split("."))
    except ValueError:
        raise VersionError(f"unparseable checkpoint version {version!r}") from None
    cur_major, cur_minor = (int(x) for x in CHECKPOINT_VERSION.split("."))
    if major != cur_major:
        raise VersionError(f"checkpoint format {version} is incompatible with {CHECKPOINT_VERSION}")
    if minor > cur_minor:
        warnings.warn(f"checkpoint format {version} is newer than {CHECKPOINT_VERSION}; "
                      "unknown fields are ignored", stacklevel=3)


def load_checkpoint(ckpt_dir, dataset: Optional[Dataset] = None):
    """Restore ``(model, trace, config)`` from a checkpoint directory.

    With ``dataset`` the content hash is checked and VAE views get their
    training data back; without it the model supports inference only.
    """
    from .trainer import TrainTrace, TraceRecord

    root = Path(ckpt_dir)
    meta_path = root / CHECKPOINT_META
    if not meta_path.exists():
        raise FormatError(f"{root}: no {CHECKPOINT_META}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: not valid JSON ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{meta_path}: bad format marker {meta.get('format')!r}")
    _check_version(meta.get("version"))
    if dataset is not None and dataset.content_hash() != meta["data_hash"]:
        raise HashMismatchError(f"dataset hash {dataset.content_hash()} does not match checkpoint "
                                f"{meta['data_hash']}")
    get = _BlobReader(root, meta["blobs"]).get

    hp = Hyperparams(**meta["hyperparams"])
    model = FAVAE(hp, meta["n"], meta["seed"])
    model.rng.bit_generator.state = meta["rng_state"]
    model.iteration = meta["iteration"]
    model.converged = meta["converged"]
    model.data_hash = meta["data_hash"]
    zm = meta["z"]
    model.z = GlobalLatent(get(zm["mean"]), get(zm["covs"]), get(zm["group"]).astype(np.int64),
                           None if zm["patterns"] is None else [tuple(p) for p in zm["patterns"]])
    inference_only = False
    for vm in meta["views"]:
        kind = ViewKind(vm["kind"])
        mask = get(vm["mask"]).astype(bool)
        entry_mask = None if vm["entry_mask"] is None else get(vm["entry_mask"])
        x = get(vm["x"])
        net = None if vm["net"] is None else _net_from_meta(vm["net"], get)
        name = vm["name"]
        if kind is ViewKind.REAL:
            view = RealView(name, x, mask, entry_mask)
        elif kind is ViewKind.FROZEN:
            view = FrozenLatentView(name, x, mask, net=net)
        elif kind is ViewKind.MULTILABEL:
            view = MultilabelView(name, get(vm["labels"]), mask, entry_mask)
            view.xi = get(vm["xi"])
        else:
            if dataset is not None:
                data = dataset[name].values
            else:
                data = np.zeros((model.n, net.input_dim))
                inference_only = True
            view = VaeView(name, data, net, mask, vm["frozen"], vm["adam"]["learning_rate"],
                           vm["prior_mode"], vm["pseudo_obs_mode"])
            ad = vm["adam"]
            view.adam = AdamState(ad["learning_rate"], ad["beta1"], ad["beta2"], ad["eps"], ad["step"],
                                  None if ad["m"] is None else [get(r) for r in ad["m"]],
                                  None if ad["v"] is None else [get(r) for r in ad["v"]])
        if not isinstance(view, FrozenLatentView):
            view.x = x
        view.x_var = None if vm["x_var"] is None else get(vm["x_var"])
        view.w = ProjectionPosterior(get(vm["w"]["mean"]), get(vm["w"]["cov"]))
        view.alpha = ArdPosterior(vm["alpha"]["a"], get(vm["alpha"]["b"]))
        view.tau = None if vm["tau"] is None else NoisePosterior(vm["tau"]["a"], vm["tau"]["b"])
        model.views[name] = view
    model.inference_only = inference_only
    trace = TrainTrace([TraceRecord(**r) for r in meta["trace"]])
    return model, trace, meta.get("config")
