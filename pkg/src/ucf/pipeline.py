"""Staged experiment pipeline: synth -> encode -> volume -> train -> infer -> eval -> report.

Every stage writes its outputs plus a ``stage.json`` holding a SHA-256 key
over its configuration subtree and the key of its upstream stage. A stage
whose key is unchanged is skipped ("cache hit"); a stage whose upstream is
missing or stale raises :class:`MissingStageError`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import cost_volume as cv
from . import data as data_mod
from . import features as feat
from . import filter_net as fn
from . import metrics, report, scoring, synthesis, toydata, training
from .errors import MissingStageError, ValidationError

log = logging.getLogger(__name__)

SCENARIOS = ("rgb", "rgb_3d", "rgb_text")
STAGES = ("synth", "encode", "volume", "train", "infer", "eval", "sweep-lambda", "report")
UPSTREAM = {
    "synth": None,
    "encode": "synth",
    "volume": "encode",
    "train": "volume",
    "infer": "train",
    "eval": "infer",
    "sweep-lambda": "infer",
    "report": "eval",
}
METHODS = ("filtered", "baseline", "fused", "gaussian")
ENV_PREFIX = "UCF_"

# per-item seed streams
_SYNTH, _TPL_TRAIN, _TPL_TEST = 1, 2, 3


def default_config():
    """Every configurable value with its default; the schema of the JSON config."""
    return {
        "scenario": "rgb",
        "seed": 0,
        "out": "runs/ucf",
        "deterministic": False,
        "jobs": 1,
        "data": {
            "root": None,  # None -> generate the toy dataset under <out>/dataset
            "categories": None,
            "toy": {"n_train": 40, "n_test_good": 8, "n_test_defect": 4, "size": 32, "seed": None},
        },
        "encoder": feat.EncoderConfig().to_dict(),
        "synth": {
            **synthesis.SynthConfig(
                beta_max=0.5, p_structural=0.0, refine_delta=0.2, min_area=0.02
            ).to_dict(),
            "per_image": 4,
        },
        "templates": {"n": 3, "provenance": "sampled_normal"},
        "pooling_mode": None,  # None -> min for rgb, avg otherwise
        "pairings": None,  # None -> scenario default
        "text": {"bank": "class", "prompts": "joint", "spread": 0.1},
        "net": {
            "unified_channels": 96,
            "widths": [16, 32, 64],
            "guidance_channels": 4,
            "spatial_kernel": 3,
            "decoder_guidance": True,
            "padding_mode": "zeros",
            "norm": "group",
            "zero_head": True,
        },
        "loss": {**training.LossConfig(epochs=20, lr=1e-3).to_dict(), "seed": None},
        # test-set AUROCs logged to the history every N epochs (monitoring only; 0 disables)
        "monitor_every": 5,
        "infer": {"lam": 0.5, "k": 250, "gaussian_sigma": 4.0, "prenormalize": False, "batch_size": 16},
        "eval": {"caps": list(metrics.AUPRO_CAPS), "per_category": True},
        "sweep": {"lambdas": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
        "report": {"heatmaps_per_category": 4, "alpha": 0.5, "cmap": "jet", "kde_grid": 512},
    }


def _merge(base, override, path=""):
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{path}{key}.")
        else:
            base[key] = value
    return base


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def env_overrides(environ=None):
    """``UCF_LOSS__EPOCHS=5`` -> ``{"loss": {"epochs": 5}}``; values are parsed as JSON when possible."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_env_value(raw)
    return out


def resolve_config(path=None, overrides=None, environ=None):
    """Defaults < JSON file < ``UCF_*`` environment < explicit overrides."""
    cfg = default_config()
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        _merge(cfg, file_cfg)
    _merge(cfg, env_overrides(environ))
    _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    if cfg["scenario"] not in SCENARIOS:
        raise ValidationError(f"scenario must be one of {SCENARIOS}, got {cfg['scenario']!r}")
    if cfg["pooling_mode"] not in (None, "min", "avg"):
        raise ValidationError(f"pooling_mode must be min or avg, got {cfg['pooling_mode']!r}")
    if cfg["templates"]["n"] < 1:
        raise ValidationError("templates.n must be >= 1")
    feat.Provenance(cfg["templates"]["provenance"])
    text = cfg["text"]
    if text["bank"] not in ("class", "object"):
        raise ValidationError(f"text.bank must be class or object, got {text['bank']!r}")
    if text["prompts"] not in ("joint", "normal", "abnormal"):
        raise ValidationError(f"text.prompts must be joint, normal or abnormal, got {text['prompts']!r}")
    if not 0.0 <= cfg["infer"]["lam"] <= 1.0:
        raise ValidationError("infer.lam must lie in [0, 1]")
    if any(not 0.0 <= lam <= 1.0 for lam in cfg["sweep"]["lambdas"]):
        raise ValidationError("sweep.lambdas must lie in [0, 1]")
    if any(not 0.0 < c <= 1.0 for c in cfg["eval"]["caps"]):
        raise ValidationError("eval.caps must lie in (0, 1]")
    if cfg["synth"]["per_image"] < 1:
        raise ValidationError("synth.per_image must be >= 1")
    pairings = scenario_pairings(cfg)
    known = {m.value for m in feat.Modality}
    for pair in pairings:
        if len(pair) != 2 or any(p not in known for p in pair):
            raise ValidationError(f"invalid pairing {pair!r}")
    synth_cfg(cfg)
    loss_cfg(cfg)
    feat.EncoderConfig(**cfg["encoder"])
    return cfg


def scenario_pairings(cfg):
    if cfg["pairings"] is not None:
        return [tuple(p) for p in cfg["pairings"]]
    if cfg["scenario"] == "rgb_3d":
        return [("rgb", "rgb"), ("d3", "d3"), ("fused", "fused")]
    if cfg["scenario"] == "rgb_text":
        return [("rgb", "text_abnormal"), ("rgb", "text_normal")]
    return [("rgb", "rgb")]


def pooling_mode(cfg):
    if cfg["pooling_mode"] is not None:
        return cfg["pooling_mode"]
    return "min" if cfg["scenario"] == "rgb" else "avg"


def synth_cfg(cfg):
    d = {k: v for k, v in cfg["synth"].items() if k != "per_image"}
    for k in ("grid_choices", "textures"):
        d[k] = tuple(d[k])
    return synthesis.SynthConfig(**d)


def loss_cfg(cfg):
    d = dict(cfg["loss"])
    if d["seed"] is None:
        d["seed"] = cfg["seed"]
    return training.LossConfig(**d)


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _dump_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Pipeline:
    """Runs stages for one resolved configuration under ``cfg["out"]``."""

    def __init__(self, cfg):
        self.cfg = validate_config(copy.deepcopy(cfg))
        self.out = Path(self.cfg["out"])
        self._keys = {}
        self._index = None

    # ------------------------------------------------------------------
    # configuration and caching

    def write_resolved_config(self):
        try:
            return _dump_json(self.out / "config.resolved.json", self.cfg)
        except OSError as exc:
            raise ValidationError(f"output directory {self.out} is not writable: {exc}") from exc

    def item_seed(self, *parts):
        return int(np.random.SeedSequence([self.cfg["seed"], *parts]).generate_state(1)[0])

    def subtree(self, stage):
        c = self.cfg
        if stage == "synth":
            return {"scenario": c["scenario"], "seed": c["seed"], "data": c["data"], "synth": c["synth"]}
        if stage == "encode":
            return {"encoder": c["encoder"], "scenario": c["scenario"], "text": c["text"]}
        if stage == "volume":
            return {
                "templates": c["templates"],
                "pooling_mode": pooling_mode(c),
                "pairings": [list(p) for p in scenario_pairings(c)],
                "seed": c["seed"],
            }
        if stage == "train":
            return {"net": c["net"], "loss": asdict(loss_cfg(c)), "monitor_every": c["monitor_every"]}
        if stage == "infer":
            return {"infer": c["infer"]}
        if stage == "eval":
            return {"eval": c["eval"]}
        if stage == "sweep-lambda":
            return {"sweep": c["sweep"], "k": c["infer"]["k"], "caps": c["eval"]["caps"]}
        if stage == "report":
            return {"report": c["report"]}
        raise ValidationError(f"unknown stage {stage!r}")

    def stage_dir(self, stage):
        return self.out / stage

    def key(self, stage):
        if stage not in self._keys:
            up = UPSTREAM[stage]
            payload = {"stage": stage, "config": self.subtree(stage)}
            if up is None:
                payload["dataset"] = self.dataset_digest()
            else:
                payload["upstream"] = self.key(up)
            self._keys[stage] = _digest(payload)
        return self._keys[stage]

    def _stage_record(self, stage):
        p = self.stage_dir(stage) / "stage.json"
        if not p.exists():
            return None
        rec = json.loads(p.read_text())
        if not all((self.stage_dir(stage) / o).exists() for o in rec.get("outputs", [])):
            return None
        return rec

    def is_current(self, stage):
        rec = self._stage_record(stage)
        return rec is not None and rec.get("key") == self.key(stage)

    def run(self, stage):
        """Run one stage (after checking its prerequisite) or ``all``."""
        self._set_threads()
        self.write_resolved_config()
        if stage == "all":
            for s in STAGES:
                self._run_one(s)
            return
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}")
        self._run_one(stage)

    def _set_threads(self):
        if self.cfg["deterministic"]:
            training.set_deterministic(True)
        else:
            torch.set_num_threads(max(1, int(self.cfg["jobs"])))

    def _run_one(self, stage):
        up = UPSTREAM[stage]
        if up is not None and not self.is_current(up):
            raise MissingStageError(stage, up)
        key = self.key(stage)
        if self.is_current(stage):
            log.info("cache hit: %s (key %s)", stage, key[:12])
            return
        log.info("running stage %s (key %s)", stage, key[:12])
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        stale = d / "stage.json"
        if stale.exists():
            stale.unlink()
        outputs = getattr(self, "_stage_" + stage.replace("-", "_"))(d)
        record = {
            "stage": stage,
            "key": key,
            "upstream": None if up is None else self.key(up),
            "config": self.subtree(stage),
            "outputs": sorted(str(Path(o).relative_to(d)) for o in outputs),
        }
        _dump_json(d / "stage.json", record)

    # ------------------------------------------------------------------
    # dataset

    def dataset_root(self):
        root = self.cfg["data"]["root"]
        return Path(root) if root is not None else self.out / "dataset"

    def ensure_dataset(self):
        root = self.dataset_root()
        if self.cfg["data"]["root"] is None and not (root / "dataset.json").exists():
            toy = dict(self.cfg["data"]["toy"])
            seed = toy.pop("seed")
            toydata.make_toy_dataset(root, seed=self.cfg["seed"] if seed is None else seed, **toy)
        return root

    def index(self):
        if self._index is None:
            idx = data_mod.ingest(self.ensure_dataset())
            cats = self.cfg["data"]["categories"]
            if cats is not None:
                missing = [c for c in cats if c not in idx.categories]
                if missing:
                    raise ValidationError(f"categories not found in dataset: {missing}")
                idx.categories = {c: idx.categories[c] for c in sorted(cats)}
            if self.cfg["scenario"] == "rgb_3d" and not idx.has_points:
                raise ValidationError("scenario rgb_3d needs a dataset with point grids (has_points)")
            self._index = idx
        return self._index

    def dataset_digest(self):
        return data_mod.dataset_digest(self.index())

    @property
    def categories(self):
        return list(self.index().categories)

    # ------------------------------------------------------------------
    # stages

    def _stage_synth(self, d):
        idx = self.index()
        scfg = synth_cfg(self.cfg)
        reps = self.cfg["synth"]["per_image"]
        needs_points = self.cfg["scenario"] == "rgb_3d"
        outputs = []
        for ci, cat in enumerate(self.categories):
            samples = []
            for k, p in enumerate(idx.categories[cat].train_normal):
                img = data_mod.load_image(p)
                pts = data_mod.load_points(p) if needs_points else None
                for r in range(reps):
                    seed = self.item_seed(_SYNTH, ci, k, r)
                    samples.append(synthesis.synthesize(img, ci, seed, scfg, point_grid=pts))
            outputs.append(synthesis.save_samples(samples, d / cat))
        return outputs

    def _encoders(self):
        ecfg = feat.EncoderConfig(**self.cfg["encoder"])
        return ecfg, feat.EncoderConfig(**{**self.cfg["encoder"], "seed": ecfg.seed + 1})

    def _encode_images(self, images, points=None):
        ecfg, dcfg = self._encoders()
        rgb = np.stack([feat.encode_toy(im, ecfg).data for im in images])
        if points is None:
            return {"rgb": rgb}
        d3 = np.stack([feat.encode_toy(feat.depth_descriptor(p), dcfg, feat.Modality.d3).data for p in points])
        return {"rgb": rgb, "d3": d3}

    def _stage_encode(self, d):
        idx = self.index()
        needs_points = self.cfg["scenario"] == "rgb_3d"
        outputs = []
        test_meta = []
        for ci, cat in enumerate(self.categories):
            c = idx.categories[cat]
            pool_imgs = [data_mod.load_image(p) for p in c.train_normal]
            pool_pts = [data_mod.load_points(p) for p in c.train_normal] if needs_points else None
            for mod, arr in self._encode_images(pool_imgs, pool_pts).items():
                outputs.append(feat.save_array(d / f"pool_{cat}_{mod}.f32", arr))

            samples = synthesis.load_samples(self.stage_dir("synth") / cat)
            s_pts = [s.point_grid for s in samples] if needs_points else None
            enc = self._encode_images([s.image for s in samples], s_pts)
            for mod, arr in enc.items():
                outputs.append(feat.save_array(d / f"synth_{cat}_{mod}.f32", arr))
            masks = np.stack([s.mask for s in samples]).astype(np.float32)
            outputs.append(feat.save_array(d / f"synth_{cat}_mask.f32", masks))

            test_imgs, test_pts = [], []
            for p, defect, label in c.test_items():
                test_imgs.append(data_mod.load_image(p))
                if needs_points:
                    test_pts.append(data_mod.load_points(p))
                gt = c.ground_truth.get(p)
                test_meta.append({
                    "category": cat,
                    "class": ci,
                    "defect": defect,
                    "label": label,
                    "image": str(Path(p).relative_to(idx.root)),
                    "mask": None if gt is None else str(Path(gt).relative_to(idx.root)),
                })
            shapes = {im.shape for im in test_imgs + pool_imgs}
            if len(shapes) != 1:
                raise ValidationError(f"category {cat} mixes image sizes {sorted(shapes)}")
            for mod, arr in self._encode_images(test_imgs, test_pts if needs_points else None).items():
                outputs.append(feat.save_array(d / f"test_{cat}_{mod}.f32", arr))

        if self.cfg["scenario"] == "rgb_text":
            outputs += self._encode_text(d)
        outputs.append(_dump_json(d / "test_meta.json", test_meta))
        return outputs

    def _encode_text(self, d):
        """Toy prompt embeddings anchored on normal and synthetic-anomaly feature prototypes."""
        stride = self.cfg["encoder"]["stride"]
        normal, abnormal = {}, {}
        for cat in self.categories:
            pool, _ = feat.load_array(d / f"pool_{cat}_rgb.f32")
            normal[cat] = pool.mean(axis=(0, 1, 3, 4), dtype=np.float64)
            sfeat, _ = feat.load_array(d / f"synth_{cat}_rgb.f32")
            masks, _ = feat.load_array(d / f"synth_{cat}_mask.f32")
            n, h, w = masks.shape
            cover = masks.reshape(n, h // stride, stride, w // stride, stride).mean(axis=(2, 4))
            cells = sfeat.transpose(0, 3, 4, 1, 2)[cover >= 0.5]  # (cells, L, C)
            if cells.shape[0] == 0:
                raise ValidationError(f"no synthetic anomaly covers a full feature cell in category {cat}")
            abnormal[cat] = cells.mean(axis=(0, 1), dtype=np.float64)

        tcfg = self.cfg["text"]
        if tcfg["bank"] == "object":
            bank = synthesis.object_agnostic_bank()
            nor_anchor = np.mean([normal[c] for c in self.categories], axis=0)
            abn_anchor = np.mean([abnormal[c] for c in self.categories], axis=0)
        else:
            bank = synthesis.default_prompt_bank()
        outputs = []
        for cat in self.categories:
            nor_p, abn_p = synthesis.render_prompts(bank, cat)
            if tcfg["bank"] != "object":
                nor_anchor, abn_anchor = normal[cat], abnormal[cat]
            nor = feat.embed_prompts_toy(feat.group_by_form(nor_p), nor_anchor, tcfg["spread"], feat.Modality.text_normal)
            abn = feat.embed_prompts_toy(feat.group_by_form(abn_p), abn_anchor, tcfg["spread"], feat.Modality.text_abnormal)
            outputs.append(feat.save_stack(d / f"text_{cat}_normal.f32", nor))
            outputs.append(feat.save_stack(d / f"text_{cat}_abnormal.f32", abn))
        return outputs

    def _load_encoded(self, prefix, cat):
        d = self.stage_dir("encode")
        out = {"rgb": feat.load_array(d / f"{prefix}_{cat}_rgb.f32")[0]}
        if self.cfg["scenario"] == "rgb_3d":
            out["d3"] = feat.load_array(d / f"{prefix}_{cat}_d3.f32")[0]
            out["fused"] = np.concatenate([out["rgb"], out["d3"]], axis=2)
        return out

    def _volume_for(self, inputs, pool, tpl_idx, text=None):
        """Cost volume and initial map for one image given per-modality feature arrays."""
        if self.cfg["scenario"] == "rgb_text":
            x = feat.FeatureStack(inputs["rgb"], feat.Modality.rgb)
            nor = feat.TemplateSet([text[0]], feat.Provenance.text_prompts)
            abn = feat.TemplateSet([text[1]], feat.Provenance.text_prompts)
            c = cv.build_text_cost_volume(x, nor, abn, self.cfg["text"]["prompts"])
            return c.data, cv.initial_map(c)
        prov = feat.Provenance(self.cfg["templates"]["provenance"])
        stacks, tpls = {}, {}
        for mod in {m for pair in scenario_pairings(self.cfg) for m in pair}:
            stacks[mod] = feat.FeatureStack(inputs[mod], mod)
            tpls[mod] = feat.TemplateSet([feat.FeatureStack(pool[mod][j], mod) for j in tpl_idx], prov)
        c = cv.build_cost_volume(stacks, tpls, scenario_pairings(self.cfg), pooling_mode(self.cfg))
        return c.data, cv.initial_map(c)

    def _stage_volume(self, d):
        n_tpl = self.cfg["templates"]["n"]
        enc = self.stage_dir("encode")
        meta = json.loads((enc / "test_meta.json").read_text())
        idx = self.index()
        train = {"vol": [], "init": [], "feats": [], "masks": [], "labels": []}
        test = {"vol": [], "init": [], "feats": [], "masks": []}
        for ci, cat in enumerate(self.categories):
            pool = self._load_encoded("pool", cat)
            synth = self._load_encoded("synth", cat)
            masks, _ = feat.load_array(enc / f"synth_{cat}_mask.f32")
            text = None
            if self.cfg["scenario"] == "rgb_text":
                text = (feat.load_stack(enc / f"text_{cat}_normal.f32"), feat.load_stack(enc / f"text_{cat}_abnormal.f32"))
            n_pool = pool["rgb"].shape[0]
            reps = len(masks) // n_pool
            for j in range(len(masks)):
                src = j // reps
                others = [i for i in range(n_pool) if i != src] or [src]
                pick = feat.sample_template_indices(len(others), n_tpl, self.item_seed(_TPL_TRAIN, ci, j))
                vol, init = self._volume_for({m: a[j] for m, a in synth.items()}, pool, [others[i] for i in pick], text)
                train["vol"].append(vol)
                train["init"].append(init)
                train["feats"].append(synth["rgb"][j])
                train["masks"].append(masks[j])
                train["labels"].append(ci)
            tests = self._load_encoded("test", cat)
            cat_meta = [m for m in meta if m["category"] == cat]
            for j, m in enumerate(cat_meta):
                pick = feat.sample_template_indices(n_pool, n_tpl, self.item_seed(_TPL_TEST, ci, j))
                vol, init = self._volume_for({k: a[j] for k, a in tests.items()}, pool, list(pick), text)
                test["vol"].append(vol)
                test["init"].append(init)
                test["feats"].append(tests["rgb"][j])
                shape = masks.shape[1:]
                mpath = None if m["mask"] is None else idx.root / m["mask"]
                test["masks"].append(data_mod.load_mask(mpath, shape).astype(np.float32))
        outputs = []
        for split, arrays in (("train", train), ("test", test)):
            for name, values in arrays.items():
                if name == "labels":
                    continue
                outputs.append(feat.save_array(d / f"{split}_{name}.f32", np.stack(values)))
        outputs.append(_dump_json(d / "train_labels.json", train["labels"]))
        return outputs

    def _load_volume(self, split):
        d = self.stage_dir("volume")
        arrays = {n: torch.from_numpy(feat.load_array(d / f"{split}_{n}.f32")[0])
                  for n in ("vol", "init", "feats", "masks")}
        return arrays

    def net_config(self, vol_shape, feat_shape):
        _, dn, layers, h, w = vol_shape
        return fn.FilterNetConfig(
            in_channels=dn,
            layers=layers,
            feature_channels=feat_shape[2],
            spatial=(h, w),
            num_classes=len(self.categories),
            seed=self.cfg["seed"],
            **self.cfg["net"],
        )

    def _stage_train(self, d):
        a = self._load_volume("train")
        labels = torch.tensor(json.loads((self.stage_dir("volume") / "train_labels.json").read_text()))
        td = training.TrainData(a["vol"], a["init"], a["feats"], a["masks"], labels)
        net = fn.build(self.net_config(a["vol"].shape, a["feats"].shape))
        result = training.train(td, net, loss_cfg(self.cfg), on_epoch=self._monitor(),
                                deterministic=self.cfg["deterministic"])
        ckpt = fn.save_checkpoint(net, d / "model.pt", {"steps": result.steps})
        hist = training.write_history(result.history, d / "history.csv")
        return [ckpt, ckpt.with_suffix(".json"), hist]

    def _monitor(self):
        every = self.cfg["monitor_every"]
        if not every:
            return None
        test = self._load_volume("test")
        meta = json.loads((self.stage_dir("encode") / "test_meta.json").read_text())
        labels = np.array([m["label"] for m in meta])
        masks = test["masks"].numpy()
        has_pixels = masks.any() and not self.index().image_label_only

        def on_epoch(epoch, net):
            if epoch % every:
                return {}
            probs = self._forward(net, test)
            maps = [scoring.upsample(p, masks.shape[1:]) for p in probs]
            row = {}
            if 0 < labels.sum() < len(labels):
                row["val I-AUROC"] = metrics.auroc([scoring.image_score(m, self.cfg["infer"]["k"]) for m in maps], labels)
            if has_pixels:
                row["val P-AUROC"] = metrics.auroc(np.concatenate([m.ravel() for m in maps]), masks.ravel() > 0.5)
            return row

        return on_epoch

    def _forward(self, net, a):
        bs = self.cfg["infer"]["batch_size"]
        probs = []
        with torch.no_grad():
            for s in range(0, a["vol"].shape[0], bs):
                out = net(a["vol"][s:s + bs], a["init"][s:s + bs], a["feats"][s:s + bs])
                probs.append(out.abnormal.numpy())
        return np.concatenate(probs)

    def _stage_infer(self, d):
        a = self._load_volume("test")
        net = fn.load_checkpoint(self.stage_dir("train") / "model.pt")
        net.eval()
        icfg = self.cfg["infer"]
        probs = self._forward(net, a)
        target = tuple(a["masks"].shape[1:])
        maps = {m: [] for m in METHODS}
        for p, init in zip(probs, a["init"].numpy()):
            filt = scoring.upsample(p, target)
            base = scoring.upsample(init.mean(axis=0), target)
            maps["filtered"].append(filt)
            maps["baseline"].append(base)
            maps["fused"].append(scoring.fuse(filt, base, icfg["lam"], icfg["prenormalize"]))
            maps["gaussian"].append(scoring.gaussian_smooth(base, icfg["gaussian_sigma"]))
        outputs = []
        for m, values in maps.items():
            outputs.append(feat.save_array(d / f"maps_{m}.f32", np.stack(values)))
        meta = json.loads((self.stage_dir("encode") / "test_meta.json").read_text())
        # the pipeline output (fused map) per image: 16-bit view PNG + raw float32
        for m, amap in zip(meta, maps["fused"]):
            stem = f"{m['category']}_{m['defect']}_{Path(m['image']).stem}"
            outputs += write_map(d / "maps" / stem, amap)
        rows = []
        for j, m in enumerate(meta):
            row = {k: m[k] for k in ("category", "defect", "image", "label")}
            for meth in METHODS:
                row[meth] = scoring.image_score(maps[meth][j], icfg["k"])
            rows.append(row)
        outputs.append(report.write_table(d / "scores.csv", rows))
        return outputs

    def load_maps(self):
        d = self.stage_dir("infer")
        maps = {m: feat.load_array(d / f"maps_{m}.f32")[0] for m in METHODS}
        masks = feat.load_array(self.stage_dir("volume") / "test_masks.f32")[0]
        meta = json.loads((self.stage_dir("encode") / "test_meta.json").read_text())
        return maps, masks, meta

    def _evaluate(self, maps, masks, meta, sel=None):
        sel = list(range(len(meta))) if sel is None else sel
        k = self.cfg["infer"]["k"]
        labels = np.array([meta[i]["label"] for i in sel])
        pixel = not self.index().image_label_only
        batch = metrics.EvalBatch(
            [scoring.image_score(maps[i], k) for i in sel],
            labels,
            [maps[i] for i in sel] if pixel else None,
            [masks[i] for i in sel] if pixel else None,
        )
        return metrics.evaluate(batch, self.cfg["eval"]["caps"], pixel=pixel)

    def _stage_eval(self, d):
        maps, masks, meta = self.load_maps()
        result = {"scenario": self.cfg["scenario"], "seed": self.cfg["seed"], "methods": {}}
        rows = []
        for m in METHODS:
            entry = {"all": self._evaluate(maps[m], masks, meta)}
            if self.cfg["eval"]["per_category"] and len(self.categories) > 1:
                for cat in self.categories:
                    sel = [i for i, x in enumerate(meta) if x["category"] == cat]
                    entry[cat] = self._evaluate(maps[m], masks, meta, sel)
            result["methods"][m] = entry
            for group, values in entry.items():
                rows.append({"method": m, "category": group, **values})
        cols = report.table_columns(rows, ("method", "category"))
        return [_dump_json(d / "metrics.json", result), report.write_table(d / "metrics.csv", rows, cols)]

    def _stage_sweep_lambda(self, d):
        maps, masks, meta = self.load_maps()
        rows = []
        for lam in self.cfg["sweep"]["lambdas"]:
            fused = np.stack([scoring.fuse(f, b, lam, self.cfg["infer"]["prenormalize"])
                              for f, b in zip(maps["filtered"], maps["baseline"])])
            rows.append({"lambda": lam, **self._evaluate(fused, masks, meta)})
        base = next((r for r in rows if r["lambda"] == 0.0), None)
        for r in rows:
            for col in ("I-AUROC", "P-AUROC"):
                if base is not None and col in r:
                    r[f"gain {col}"] = r[col] - base[col]
        return [
            _dump_json(d / "lambda_sweep.json", rows),
            report.write_table(d / "lambda_sweep.csv", rows, report.table_columns(rows, ("lambda",))),
            report.plot_lambda_sweep(d / "lambda_sweep.png", rows),
        ]

    def _stage_report(self, d):
        return report.build_report(self, d)


# ----------------------------------------------------------------------
# file helpers


def write_map(stem, amap):
    """16-bit view-normalized PNG plus raw float32 (with JSON sidecar) for one map."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    view = np.round(scoring.normalize_for_view(amap) * 65535).astype(np.uint16)
    png = stem.with_suffix(".png")
    Image.fromarray(view).save(png)
    raw = feat.save_array(stem.with_suffix(".f32"), amap)
    return [png, raw, raw.with_suffix(".f32.json")]


ABLATIONS = {
    # volume composition: RGB-only matching vs joint RGB / 3D / fused matching
    "volumes": {
        "rgb-only": {"scenario": "rgb_3d", "pairings": [["rgb", "rgb"]]},
        "joint": {"scenario": "rgb_3d", "pairings": None},
    },
    # prompt types feeding the text volume
    "prompts": {
        "normal-only": {"scenario": "rgb_text", "text": {"prompts": "normal"}},
        "abnormal-only": {"scenario": "rgb_text", "text": {"prompts": "abnormal"}},
        "joint": {"scenario": "rgb_text", "text": {"prompts": "joint"}},
    },
}


def run_ablation(cfg, kind):
    """Run every variant of an ablation through eval on one shared dataset and tabulate."""
    if kind not in ABLATIONS:
        raise ValidationError(f"unknown ablation {kind!r}; choose from {sorted(ABLATIONS)}")
    base = Pipeline(cfg)
    base.write_resolved_config()
    root = base.ensure_dataset()
    out = base.out / "ablate" / kind
    results = {}
    for name, override in ABLATIONS[kind].items():
        vcfg = copy.deepcopy(base.cfg)
        _merge(vcfg, copy.deepcopy(override))
        vcfg["data"]["root"] = str(root)
        vcfg["out"] = str(out / name)
        pipe = Pipeline(vcfg)
        pipe.write_resolved_config()
        pipe._set_threads()
        for stage in ("synth", "encode", "volume", "train", "infer", "eval"):
            pipe._run_one(stage)
        results[name] = json.loads((pipe.stage_dir("eval") / "metrics.json").read_text())
    return report.ablation_table(out / "ablation", results)
