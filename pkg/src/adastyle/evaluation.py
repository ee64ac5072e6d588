"""Text-alignment benchmark over a prompt x style grid, plus the four-row ablation."""

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention_math import CROSS_MODAL_ADAIN, WEIGHTED_SUM
from .errors import ConfigError
from .guidance import TEXT_CFG
from .pipeline import GenerationConfig, generate
from .toy_backend import hash_normal

UNIT_TOL = 1e-5

ABLATION_ROWS = (
    ("baseline", False, False),
    ("+teacher", False, True),
    ("+adain", True, False),
    ("+both", True, True),
)


def expand_template(colors, objects, template="A {color} {object}"):
    return [template.format(color=c, object=o) for c in colors for o in objects]


@dataclass
class BenchmarkGrid:
    prompts: list
    style_images: list
    config: dict = field(default_factory=dict)
    cell_overrides: dict = field(default_factory=dict)  # (prompt_idx, style_idx) -> dict

    def __post_init__(self):
        if not self.prompts:
            raise ConfigError("prompts", "grid needs at least one prompt")
        if not self.style_images:
            raise ConfigError("style_images", "grid needs at least one style image")

    def __len__(self):
        return len(self.prompts) * len(self.style_images)

    def cells(self):
        for i, prompt in enumerate(self.prompts):
            for j, style in enumerate(self.style_images):
                yield i, j, prompt, style

    def cell_config(self, base, i, j):
        cfg = GenerationConfig.from_dict(self.config, base=base)
        cfg = GenerationConfig.from_dict(self.cell_overrides.get((i, j), {}), base=cfg)
        return cfg.replace(prompt=self.prompts[i], style_image_path=self.style_images[j])


def load_grid(path):
    """Read a JSON grid file. Relative style paths resolve against the file's directory.

    Keys: ``prompts`` (list) or ``template`` (``{"colors", "objects"}``),
    ``style_images`` (list), optional ``config`` (shared overrides) and
    ``cells`` (list of ``{"prompt": i, "style": j, "overrides": {...}}``).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("grid", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("grid", f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("grid", "grid file must hold a JSON object")
    prompts = list(data.get("prompts") or [])
    template = data.get("template")
    if template:
        prompts += expand_template(template.get("colors", []), template.get("objects", []))
    root = os.path.dirname(os.path.abspath(path))
    styles = [p if os.path.isabs(p) else os.path.join(root, p) for p in data.get("style_images") or []]
    overrides = {}
    for cell in data.get("cells") or []:
        overrides[(int(cell["prompt"]), int(cell["style"]))] = dict(cell.get("overrides", {}))
    config = dict(data.get("config") or {})
    for key in ("prompt", "style_image_path"):
        if key in config:
            raise ConfigError(key, "set per cell by the grid, not in the grid config")
    GenerationConfig.from_dict(config)  # reject unknown keys early
    return BenchmarkGrid(prompts, styles, config, overrides)


@dataclass(frozen=True)
class AlignmentScore:
    value: float
    prompt: str
    image_id: str


def _check_unit(name, v):
    v = np.asarray(v, dtype=np.float64).ravel()
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} embedding has norm {n}, expected a unit vector")
    return v


def image_id(image):
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:16]


def text_alignment(image, prompt, embedder):
    """Cosine similarity of the image and prompt embeddings."""
    a = _check_unit("image", embedder.embed_image(image))
    b = _check_unit("text", embedder.embed_text(prompt))
    if a.shape != b.shape:
        raise ValueError(f"embedding sizes differ: {a.shape} vs {b.shape}")
    value = float(np.clip(a @ b, -1.0, 1.0))
    return AlignmentScore(value=value, prompt=prompt, image_id=image_id(image))


def _normalize(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        v = np.zeros_like(v)
        v[0] = 1.0
        return v
    return v / n


class MockEmbedder:
    """Deterministic stand-in for CLIP: hashed bag-of-words text, random-projection image."""

    def __init__(self, dim=32, seed=0, image_grid=8):
        self.dim = dim
        self.seed = seed
        self.image_grid = image_grid
        self._proj = hash_normal((image_grid * image_grid * 3, dim), "mock-embedder", seed, "image")

    def embed_text(self, text):
        v = np.zeros(self.dim)
        for tok in text.lower().split():
            v += hash_normal((self.dim,), "mock-embedder", self.seed, "token", tok)
        return _normalize(v)

    def embed_image(self, image):
        from PIL import Image

        g = self.image_grid
        img = np.asarray(image)
        if img.shape[0] % g or img.shape[1] % g:
            img = np.asarray(Image.fromarray(img).resize((g, g), Image.BILINEAR))
        else:
            img = img.reshape(g, img.shape[0] // g, g, img.shape[1] // g, 3).mean(axis=(1, 3))
        x = img.reshape(-1).astype(np.float64) / 255.0 - 0.5
        return _normalize(x @ self._proj)


class ClipEmbedder:
    """CLIP scorer via ``transformers``; weights are fetched on first use.

    Scores from this class are not directly comparable with published CLIP
    numbers unless the same checkpoint and preprocessing are used.
    """

    def __init__(self, model_name="openai/clip-vit-large-patch14", device="cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.device = device

    def _unit(self, feats):
        v = feats[0].detach().cpu().double().numpy()
        return v / np.linalg.norm(v)

    def embed_image(self, image):
        from PIL import Image

        inputs = self.processor(images=Image.fromarray(np.asarray(image)), return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            return self._unit(self.model.get_image_features(**inputs))

    def embed_text(self, text):
        inputs = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with self._torch.no_grad():
            return self._unit(self.model.get_text_features(**inputs))


@dataclass
class CellResult:
    prompt_index: int
    style_index: int
    prompt: str
    style_image: str
    score: Optional[float] = None
    image_id: Optional[str] = None
    error: Optional[str] = None
    seconds: Optional[float] = None


@dataclass
class ConfigRow:
    name: str
    config: dict
    cells: list
    mean: Optional[float] = None
    n_failed: int = 0

    @property
    def complete(self):
        return self.n_failed == 0

    def recompute_mean(self):
        scores = [c.score for c in self.cells if c.score is not None]
        self.mean = sum(scores) / len(scores) if scores else None
        self.n_failed = sum(c.score is None for c in self.cells)


@dataclass
class ResultTable:
    rows: list

    @property
    def failed_cells(self):
        return [(row.name, c) for row in self.rows for c in row.cells if c.error is not None]

    def to_dict(self, timing=False):
        rows = []
        for row in self.rows:
            cells = []
            for c in row.cells:
                d = dataclasses.asdict(c)
                if not timing:
                    d.pop("seconds")
                cells.append(d)
            rows.append(
                {
                    "cells": cells,
                    "complete": row.complete,
                    "config": row.config,
                    "mean": row.mean,
                    "n_cells": len(row.cells),
                    "n_failed": row.n_failed,
                    "name": row.name,
                }
            )
        return {"rows": rows}

    @classmethod
    def from_dict(cls, data):
        rows = []
        for r in data["rows"]:
            cells = [CellResult(**c) for c in r["cells"]]
            rows.append(ConfigRow(name=r["name"], config=r["config"], cells=cells, mean=r["mean"], n_failed=r["n_failed"]))
        return cls(rows)

    def emit(self, timing=False):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"

    @classmethod
    def parse(cls, text):
        return cls.from_dict(json.loads(text))


def _run_cell(cfg, i, j, prompt, style, backend, embedder):
    start = time.perf_counter()
    cell = CellResult(prompt_index=i, style_index=j, prompt=prompt, style_image=style)
    try:
        result = generate(cfg, backend=backend)
        score = text_alignment(result.image, prompt, embedder)
        cell.score = score.value
        cell.image_id = score.image_id
    except Exception as exc:  # recorded per cell; the run continues
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.perf_counter() - start
    return cell


def run_benchmark(grid, backend, embedder, base_config=None, name="config", jobs=1):
    """Score every grid cell under one configuration; returns a one-row table."""
    base = base_config or GenerationConfig()
    jobs_args = [(grid.cell_config(base, i, j), i, j, p, s) for i, j, p, s in grid.cells()]
    if jobs > 1 and getattr(backend, "stateless", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, *a, backend, embedder) for a in jobs_args]
            cells = [f.result() for f in futures]
    else:
        cells = [_run_cell(*a, backend, embedder) for a in jobs_args]
    row_cfg = GenerationConfig.from_dict(grid.config, base=base).to_dict()
    for key in ("prompt", "style_image_path"):
        row_cfg.pop(key)
    row = ConfigRow(name=name, config=row_cfg, cells=cells)
    row.recompute_mean()
    return ResultTable([row])


def ablation_configs(base_config=None):
    """The four standard rows: baseline, +teacher, +adain, +both (text CFG throughout)."""
    base = base_config or GenerationConfig()
    out = []
    for name, adain, teacher in ABLATION_ROWS:
        out.append(
            (
                name,
                base.replace(
                    fusion_mode=CROSS_MODAL_ADAIN if adain else WEIGHTED_SUM,
                    teacher_enabled=teacher,
                    scfg_mode=TEXT_CFG,
                ),
            )
        )
    return out


def run_ablation(grid, backend, embedder, base_config=None, jobs=1):
    """One table row per mechanism combination.

    Grid-level ``config`` overrides apply on top of ``base_config`` but may
    not re-enable what a row switches off.
    """
    shared = {k: v for k, v in grid.config.items() if k not in ("fusion_mode", "teacher_enabled", "scfg_mode")}
    base = GenerationConfig.from_dict(shared, base=base_config or GenerationConfig())
    plain = dataclasses.replace(grid, config={})
    rows = []
    for name, cfg in ablation_configs(base):
        rows.extend(run_benchmark(plain, backend, embedder, base_config=cfg, name=name, jobs=jobs).rows)
    return ResultTable(rows)


def table_csv(table, timing=False):
    buf = io.StringIO()
    header = ["config", "cross_modal_adain", "teacher_model", "style_cfg", "text_alignment", "n_cells", "n_failed"]
    if timing:
        header.append("infer_time_s")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in table.rows:
        c = row.config
        line = [
            row.name,
            int(c.get("fusion_mode") == CROSS_MODAL_ADAIN),
            int(bool(c.get("teacher_enabled"))),
            int(c.get("scfg_mode") == "style_cfg"),
            "" if row.mean is None else repr(row.mean),
            len(row.cells),
            row.n_failed,
        ]
        if timing:
            secs = [cell.seconds for cell in row.cells if cell.seconds is not None]
            line.append(f"{sum(secs) / len(secs):.4f}" if secs else "")
        writer.writerow(line)
    return buf.getvalue()


def write_results(table, out_dir, csv_export=False, timing=False):
    """Write ``cells.jsonl``, ``summary.json``, optionally ``table.csv``, and ``errors.json`` on failures."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "cells.jsonl"), "w", encoding="utf-8") as fh:
        for row in table.rows:
            for cell in row.cells:
                d = dataclasses.asdict(cell)
                if not timing:
                    d.pop("seconds")
                d["config"] = row.name
                fh.write(json.dumps(d, sort_keys=True) + "\n")
    summary = {
        "rows": [
            {"complete": r.complete, "mean": r.mean, "n_cells": len(r.cells), "n_failed": r.n_failed, "name": r.name}
            for r in table.rows
        ]
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as fh:
        fh.write(table.emit(timing))
    if csv_export:
        with open(os.path.join(out_dir, "table.csv"), "w", encoding="utf-8") as fh:
            fh.write(table_csv(table, timing))
    failed = table.failed_cells
    errors_path = os.path.join(out_dir, "errors.json")
    if failed:
        manifest = [
            {"config": name, "error": c.error, "prompt_index": c.prompt_index, "style_index": c.style_index}
            for name, c in failed
        ]
        with open(errors_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif os.path.exists(errors_path):
        os.remove(errors_path)


def vote_percentages(path):
    """Turn a votes CSV (one row per vote, a ``method`` column) into percentages per method."""
    with open(path, newline="", encoding="utf-8") as fh:
        votes = [row["method"] for row in csv.DictReader(fh)]
    if not votes:
        return {}
    counts = {}
    for m in votes:
        counts[m] = counts.get(m, 0) + 1
    return {m: 100.0 * n / len(votes) for m, n in sorted(counts.items())}
