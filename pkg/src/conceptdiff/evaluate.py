"""Surrogate-set construction, downstream classifier training, top-1
evaluation, and the resumable sweep runner."""

import csv
import dataclasses
import json
import os
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .concepts import ConceptBank, NegativeStrategy
from .data import Dataset, Sample
from .diffusion import DenoiserModel, NoiseSchedule
from .embedder import JointEmbedder
from .errors import ArgumentError, ConfigError
from .guidance import GuidanceConfig, generate_informed
from .nn import Adam, conv_param, cosine_lr, linear_param, zero_grads, zeros_param
from .seeds import rng_for

METHODS = ("RandomReal", "Unguided", "Cosine", "Contrastive", "Classifier", "Combined")

METHOD_OBJECTIVE = {
    "Unguided": "none",
    "Cosine": "cosine",
    "Contrastive": "contrastive",
    "Classifier": "classifier",
    "Combined": "combined",
}

CSV_HEADER = "experiment_id,method,ipc,seed,lambda,n_neg,strategy,top1,wall_seconds,config_crc"


@dataclass
class SurrogateSet:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int
    method: str
    ipc: int
    seed: int
    manifest: dict = None

    def __post_init__(self):
        counts = np.bincount(self.labels)
        counts = counts[counts > 0]
        if counts.size and not np.all(counts == self.ipc):
            raise ArgumentError("surrogate set must hold exactly IPC samples per category")


def build_surrogate(method: str, ipc: int, seed: int, dataset: Dataset,
                    schedule: NoiseSchedule = None, denoiser: DenoiserModel = None,
                    embedder: JointEmbedder = None, bank: ConceptBank = None,
                    cfg: GuidanceConfig = None, classifier=None) -> SurrogateSet:
    """IPC samples per category, either selected from the real train split
    or generated with the configured guidance objective."""
    if method not in METHODS:
        raise ArgumentError(f"unknown method {method!r}")
    if ipc < 1:
        raise ArgumentError("ipc must be >= 1")
    cats = dataset.categories
    images, labels = [], []
    if method == "RandomReal":
        for cat in cats:
            pool = dataset.images_of(cat.id, "train")
            if ipc > pool.shape[0]:
                raise ArgumentError(
                    f"ipc {ipc} exceeds real per-class count {pool.shape[0]}")
            idx = rng_for(seed, "random-real", cat.id).choice(pool.shape[0], size=ipc,
                                                              replace=False)
            images.append(pool[idx])
            labels.extend([cat.id] * ipc)
    else:
        if denoiser is None or embedder is None or bank is None or schedule is None:
            raise ArgumentError(f"method {method} needs trained models, a schedule, and a bank")
        gen_cfg = dataclasses.replace(cfg or GuidanceConfig(),
                                      objective=METHOD_OBJECTIVE[method])
        if gen_cfg.objective in ("classifier", "combined") and classifier is None:
            raise ArgumentError(f"method {method} requires a guidance classifier")
        for cat in cats:
            samples = generate_informed(denoiser, schedule, embedder, bank, gen_cfg,
                                        cat.id, ipc, seed, classifier=classifier)
            images.append(np.stack([s.image for s in samples]))
            labels.extend([cat.id] * ipc)
    return SurrogateSet(images=np.concatenate(images).astype(np.float32),
                        labels=np.asarray(labels, dtype=np.int64),
                        method=method, ipc=ipc, seed=seed)


# ---------------------------------------------------------------------------
# downstream classifier (hard labels, plain cross-entropy)


@dataclass
class EvalTrainConfig:
    epochs: int = 60
    max_batch: int = 64
    lr: float = 2e-3
    channels: tuple = (24, 48, 64)


class EvalClassifier:
    """3-block convnet under 100k parameters for surrogate evaluation."""

    ARCH = "eval-classifier"

    def __init__(self, n_classes, hw=16, channels=(24, 48, 64), params=None, rng=None):
        self.n_classes = n_classes
        self.hw = hw
        self.channels = tuple(channels)
        if params is not None:
            self.params = params
            return
        c1, c2, c3 = self.channels
        p = {}
        p["c1w"] = conv_param(rng, c1, 3, 3)
        p["c1b"] = zeros_param((c1,))
        p["c2w"] = conv_param(rng, c2, c1, 3)
        p["c2b"] = zeros_param((c2,))
        p["c3w"] = conv_param(rng, c3, c2, 3)
        p["c3b"] = zeros_param((c3,))
        p["fw"] = linear_param(rng, c3, n_classes)
        p["fb"] = zeros_param((n_classes,))
        self.params = p

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(x, p["c1w"], p["c1b"]))
        h = ad.avgpool2(h)
        h = ad.relu(ad.conv2d(h, p["c2w"], p["c2b"]))
        h = ad.avgpool2(h)
        h = ad.relu(ad.conv2d(h, p["c3w"], p["c3b"]))
        h = ad.mean_spatial(h)
        return ad.affine(h, p["fw"], p["fb"])

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        return self.forward(ad.Tensor(np.asarray(images, dtype=np.float32))).data

    def finalize(self):
        self.params = {k: v.detach() for k, v in self.params.items()}
        return self


def train_classifier(images, labels, n_classes, config: EvalTrainConfig, seed: int):
    """Cross-entropy training with horizontal-flip augmentation and a
    cosine-decayed learning rate; deterministic per seed."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ArgumentError("empty training set")
    rng = rng_for(seed, "train-eval-cls")
    model = EvalClassifier(n_classes, hw=images.shape[-1], rng=rng)
    plist = list(model.params.values())
    opt = Adam(plist, lr=config.lr)
    n = images.shape[0]
    batch = min(n, config.max_batch)
    steps_per_epoch = max(1, n // batch)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * batch : (b + 1) * batch]
            x = images[idx].copy()
            flip = rng.random(idx.size) < 0.5
            x[flip] = x[flip, :, :, ::-1]
            logits = model.forward(ad.Tensor(x))
            nll = ad.sub(ad.logsumexp(logits, axis=1), ad.take_rows(logits, labels[idx]))
            loss = ad.mean_all(nll)
            zero_grads(plist)
            ad.backward(loss)
            opt.step(lr=cosine_lr(config.lr, step, total_steps))
            step += 1
    return model.finalize()


def evaluate_top1(classifier: EvalClassifier, images, labels) -> float:
    """Fraction of argmax-correct predictions; logit ties go to the lowest
    class id."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    correct = 0
    for lo in range(0, images.shape[0], 256):
        logits = classifier.predict_logits(images[lo : lo + 256])
        correct += int((np.argmax(logits, axis=1) == labels[lo : lo + 256]).sum())
    return correct / images.shape[0]


# ---------------------------------------------------------------------------
# PPM grid export


def export_grid(samples, path, per_row=8):
    """Binary PPM (P6) grid, samples row-major ordered by class id."""
    samples = list(samples)
    if not samples:
        raise ArgumentError("export_grid: empty sample list")
    order = sorted(range(len(samples)), key=lambda i: (samples[i].label, i))
    imgs = [samples[i].image for i in order]
    c, h, w = imgs[0].shape
    cols = min(per_row, len(imgs))
    rows = (len(imgs) + cols - 1) // cols
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for k, img in enumerate(imgs):
        r, cc = divmod(k, cols)
        # [-1,1] -> [0,255] with round-half-up
        byte = np.floor((img.astype(np.float64) + 1.0) / 2.0 * 255.0 + 0.5)
        byte = np.clip(byte, 0, 255).astype(np.uint8)
        canvas[r * h : (r + 1) * h, cc * w : (cc + 1) * w, :] = byte.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols * w} {rows * h}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())


def parse_ppm(path):
    """Read back a P6 file written by export_grid (round-trip checks)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ArgumentError("not a P6 file")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# sweep runner


@dataclass
class ExperimentConfig:
    experiment_id: str
    methods: list
    ipcs: list
    seeds: list
    lambdas: list = field(default_factory=lambda: [1.0])
    n_negs: list = field(default_factory=lambda: [10])
    strategies: list = field(default_factory=lambda: ["weighted"])
    steps: int = 50
    epochs: int = 60
    jobs: int = 1
    export_grids: bool = True

    def cells(self):
        for method in self.methods:
            for ipc in self.ipcs:
                for seed in self.seeds:
                    for lam in self.lambdas:
                        for n_neg in self.n_negs:
                            for strat in self.strategies:
                                yield (method, int(ipc), int(seed), float(lam),
                                       int(n_neg), str(strat))

    def to_json(self):
        return {
            "experiment_id": self.experiment_id,
            "method": list(self.methods),
            "ipc": [int(v) for v in self.ipcs],
            "seed": [int(v) for v in self.seeds],
            "lambda": [float(v) for v in self.lambdas],
            "n_neg": [int(v) for v in self.n_negs],
            "strategy": [str(v) for v in self.strategies],
            "steps": self.steps,
            "epochs": self.epochs,
        }

    def crc(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return f"{zlib.crc32(blob):08x}"


@dataclass
class EvalReport:
    rows: list

    def mean_top1(self, **filt) -> float:
        vals = [r["top1"] for r in self.rows if all(str(r[k]) == str(v)
                                                    for k, v in filt.items())]
        if not vals:
            raise ArgumentError(f"no rows match {filt}")
        return float(np.mean(vals))

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                row["ipc"] = int(row["ipc"])
                row["seed"] = int(row["seed"])
                row["lambda"] = float(row["lambda"])
                row["n_neg"] = int(row["n_neg"])
                row["top1"] = float(row["top1"])
                rows.append(row)
        return cls(rows=rows)


def _cell_key(row):
    return (row["method"], int(row["ipc"]), int(row["seed"]), float(row["lambda"]),
            int(row["n_neg"]), row["strategy"])


def run_experiment(config: ExperimentConfig, out_dir, dataset: Dataset,
                   schedule: NoiseSchedule, denoiser: DenoiserModel,
                   embedder: JointEmbedder, bank: ConceptBank,
                   classifier=None) -> EvalReport:
    """Cartesian sweep with incremental CSV appends; completed cells are
    skipped on rerun, so a crashed sweep resumes where it stopped."""
    if denoiser is None or embedder is None or bank is None:
        raise ConfigError("run_experiment needs denoiser, embedder, and bank")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    config_crc = config.crc()
    with open(os.path.join(out_dir, "experiment.json"), "w") as fh:
        json.dump(config.to_json(), fh, indent=1)

    done = set()
    if os.path.exists(csv_path):
        for row in EvalReport.from_csv(csv_path).rows:
            done.add(_cell_key(row))
    else:
        with open(csv_path, "w") as fh:
            fh.write(CSV_HEADER + "\n")

    todo = [c for c in config.cells() if c not in done]
    lock = threading.Lock()

    def run_cell(cell):
        method, ipc, seed, lam, n_neg, strat = cell
        t0 = time.time()
        cfg = GuidanceConfig(lam=lam, objective=METHOD_OBJECTIVE.get(method, "none"),
                             n_neg=n_neg, strategy=NegativeStrategy.parse(strat),
                             steps=config.steps)
        surrogate = build_surrogate(method, ipc, seed, dataset, schedule=schedule,
                                    denoiser=denoiser, embedder=embedder, bank=bank,
                                    cfg=cfg, classifier=classifier)
        model = train_classifier(surrogate.images, surrogate.labels,
                                 len(dataset.categories),
                                 EvalTrainConfig(epochs=config.epochs), seed)
        top1 = evaluate_top1(model, dataset.test_x, dataset.test_y)
        wall = time.time() - t0
        if config.export_grids:
            grid_dir = os.path.join(out_dir, "grids")
            os.makedirs(grid_dir, exist_ok=True)
            name = f"{method}_ipc{ipc}_seed{seed}_lam{lam}_neg{n_neg}_{strat}.ppm"
            export_grid(
                [Sample(image=im, label=la) for im, la in
                 zip(surrogate.images, surrogate.labels)][: 8 * min(ipc, 8)],
                os.path.join(grid_dir, name.replace(":", "")),
            )
        row = {
            "experiment_id": config.experiment_id, "method": method, "ipc": ipc,
            "seed": seed, "lambda": lam, "n_neg": n_neg, "strategy": strat,
            "top1": top1, "wall_seconds": round(wall, 3), "config_crc": config_crc,
        }
        with lock:
            with open(csv_path, "a", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=CSV_HEADER.split(","))
                w.writerow(row)
                fh.flush()
        return row

    if config.jobs > 1 and len(todo) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            list(pool.map(run_cell, todo))
    else:
        for cell in todo:
            run_cell(cell)
    return EvalReport.from_csv(csv_path)
