"""End-to-end desk pipeline shared by the acceptance suite.

Set ``MORPHGEN_ACCEPTANCE_CACHE`` to a directory to keep trained checkpoints
between runs; without it everything is trained from scratch.
"""
import logging
import os
import time

import numpy as np

from morphgen.cli import dispatch
from morphgen.config import RunConfig
from morphgen.diffusion import DdpmModel, bridge_conditional, sample_unconditional, train_ddpm, traverse_trajectory
from morphgen.diffusion.ddpm import safe_descriptors
from morphgen.evaluation import embed, fid, ks_two_sample
from morphgen.synth import generate_dataset
from morphgen.volume import CellVolume, preprocess
from morphgen.vqgan import VQGAN, train_vqgan

log = logging.getLogger("acceptance")

ARCHETYPES = ("round", "protrusive")
TRAIN_SEEDS = {"round": 1, "protrusive": 2}
HELD_SEEDS = {"round": 11, "protrusive": 12}
BRIDGE_INPUT_SEED = 21
MASTER_SEEDS = (0, 1, 2)
SPHERICITY, PROTRUSIVITY = 2, 4


def cache_dir():
    path = os.environ.get("MORPHGEN_ACCEPTANCE_CACHE")
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def cells(archetype, n, seed, cube=32):
    return np.stack([preprocess(c.volume, cube).data for c in generate_dataset(archetype, n, seed, cube=cube)])


def cyto_descriptors(volumes):
    """(N, 5) descriptor rows of the cytoplasm channel; NaN rows where no surface exists."""
    return np.array([safe_descriptors(CellVolume(v[:1]))[0].as_array() for v in volumes])


class Stage1:
    def __init__(self, cfg=None):
        self.cfg = cfg or RunConfig()
        self.train = {a: cells(a, 100, TRAIN_SEEDS[a], self.cfg.cube) for a in ARCHETYPES}
        self.held = np.concatenate([cells(a, 10, HELD_SEEDS[a], self.cfg.cube) for a in ARCHETYPES])
        cache = cache_dir()
        prefix = os.path.join(cache, "vqgan") if cache else None
        if prefix and os.path.exists(prefix + ".mfwt"):
            self.model = VQGAN.load(prefix)
            self.runtime = float(open(prefix + ".runtime").read())
            self.curve = np.loadtxt(prefix + ".curve")
        else:
            data = np.concatenate([self.train[a] for a in ARCHETYPES])
            start = time.perf_counter()
            self.model = train_vqgan(data, self.cfg.vqgan_config(2), progress_every=100)
            self.runtime = time.perf_counter() - start
            self.curve = np.array([r[1] for r in self.model.train_log])
            if prefix:
                self.model.save(prefix)
                with open(prefix + ".runtime", "w") as fh:
                    fh.write(repr(self.runtime))
                np.savetxt(prefix + ".curve", self.curve)
        self.latents = {a: self.encode(self.train[a]) for a in ARCHETYPES}

    def encode(self, x, batch=16):
        return np.concatenate([self.model.encode_batch(x[i : i + batch]).data for i in range(0, len(x), batch)])

    def heldout_mse(self):
        return float(((self.model.reconstruct(self.held) - self.held) ** 2).mean())


def stage2_models(stage1, seed):
    """One DDPM per archetype for a master seed, trained on frozen latents."""
    cache = cache_dir()
    out = {}
    for a in ARCHETYPES:
        prefix = os.path.join(cache, f"ddpm_{a}_s{seed}") if cache else None
        if prefix and os.path.exists(prefix + ".mfwt"):
            out[a] = DdpmModel.load(prefix)
            continue
        cfg = stage1.cfg.ddpm_config(a)
        cfg.seed = seed
        out[a] = train_ddpm(stage1.latents[a], cfg, progress_every=1000)
        if prefix:
            out[a].save(prefix)
    return out


def evaluate_unconditional(stage1, models, seed, n=100):
    """Own- versus cross-class KS distances and FIDs for every archetype."""
    real_desc = {a: cyto_descriptors(stage1.train[a]) for a in ARCHETYPES}
    real_emb = {a: embed(stage1.train[a], stage1.model) for a in ARCHETYPES}
    result = {}
    for a in ARCHETYPES:
        other = [b for b in ARCHETYPES if b != a][0]
        gen = sample_unconditional(models[a], stage1.model, n, seed=seed)
        desc = cyto_descriptors(gen)
        ok = ~np.isnan(desc).any(axis=1)
        emb = embed(gen, stage1.model)
        row = {"valid": int(ok.sum())}
        for name, col in (("sphericity", SPHERICITY), ("protrusivity", PROTRUSIVITY)):
            row[f"ks_{name}_own"] = ks_two_sample(desc[ok, col], real_desc[a][:, col])["statistic"]
            row[f"ks_{name}_cross"] = ks_two_sample(desc[ok, col], real_desc[other][:, col])["statistic"]
        row["fid_own"] = fid(real_emb[a], emb)
        row["fid_cross"] = fid(real_emb[other], emb)
        row["passed"] = (
            row["ks_sphericity_own"] < row["ks_sphericity_cross"]
            and row["ks_protrusivity_own"] < row["ks_protrusivity_cross"]
            and row["fid_own"] < row["fid_cross"]
        )
        result[a] = row
    return result


def bridge_round_to_protrusive(stage1, models, seed=0, n=100):
    """Paired descriptors of round inputs and their bridged outputs."""
    cfg = stage1.cfg
    x = cells("round", n, BRIDGE_INPUT_SEED, cfg.cube)
    tb = max(1, int(round(cfg.t_bridge_fraction * models["protrusive"].config.T)))
    out = bridge_conditional(x, models["round"], models["protrusive"], stage1.model, tb, seed=seed)
    return x, out, cyto_descriptors(x), cyto_descriptors(out), tb


def trajectory_endpoint(stage1, models, x, tb, seed=0):
    entries = traverse_trajectory(CellVolume(x), models["round"], models["protrusive"], stage1.model, tb, stage1.cfg.stride, seed)
    single = bridge_conditional(CellVolume(x), models["round"], models["protrusive"], stage1.model, tb, seed=seed)
    return entries, single


# ---------------------------------------------------------------- command-line pipeline

TINY = """\
cube = 16
n_z = 4
codebook_size = 32
vq_widths = 4,4,8
disc_widths = 4,4,4
vq_steps = 4
T = 6
ddpm_base = 4
ddpm_steps = 2
n_samples = 2
stride = 2
n_cells = 3
"""


def run_pipeline(root):
    """Every subcommand once, in a fresh directory; returns the exit codes."""
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]
    r = str(root)
    codes = [
        dispatch(["synth", "--archetype", "round", "--out", f"{r}/round", "--signal"] + c),
        dispatch(["synth", "--archetype", "protrusive", "--out", f"{r}/prot", "--seed", "1"] + c),
        dispatch(["train-vqgan", "--data", f"{r}/round", f"{r}/prot", "--out", f"{r}/vq"] + c),
        dispatch(["train-vqgan", "--data", f"{r}/round", "--signal", "--out", f"{r}/vqsig"] + c),
        dispatch(["train-ddpm", "--vqgan", f"{r}/vq/vqgan", "--data", f"{r}/round", "--label", "round", "--out", f"{r}/dr"] + c),
        dispatch(["train-ddpm", "--vqgan", f"{r}/vq/vqgan", "--data", f"{r}/prot", "--label", "protrusive", "--out", f"{r}/dp"] + c),
        dispatch(
            ["train-ddpm", "--vqgan", f"{r}/vqsig/vqgan", "--cond-vqgan", f"{r}/vq/vqgan", "--data", f"{r}/round", "--out", f"{r}/ds"]
            + c
        ),
        dispatch(["generate", "--vqgan", f"{r}/vq/vqgan", "--ddpm", f"{r}/dp/ddpm", "--out", f"{r}/gen"] + c),
        dispatch(
            ["bridge", "--vqgan", f"{r}/vq/vqgan", "--source-ddpm", f"{r}/dr/ddpm", "--target-ddpm", f"{r}/dp/ddpm"]
            + ["--data", f"{r}/round", "--out", f"{r}/br"]
            + c
        ),
        dispatch(
            ["traverse", "--vqgan", f"{r}/vq/vqgan", "--source-ddpm", f"{r}/dr/ddpm", "--target-ddpm", f"{r}/dp/ddpm"]
            + ["--input", f"{r}/round/round_00000.mvol", "--out", f"{r}/tr"]
            + c
        ),
        dispatch(
            ["synth-signal", "--vqgan", f"{r}/vq/vqgan", "--signal-vqgan", f"{r}/vqsig/vqgan", "--ddpm", f"{r}/ds/ddpm"]
            + ["--data", f"{r}/round", "--out", f"{r}/sig"]
            + c
        ),
        dispatch(["mesh", "--input", f"{r}/round/round_00000.mvol", "--out", f"{r}/mesh"] + c),
        dispatch(["descriptors", "--data", f"{r}/round", f"{r}/prot", "--out", f"{r}/desc"] + c),
        dispatch(
            ["eval", "ks", "--a", f"{r}/desc/descriptors.csv", "--b", f"{r}/desc/descriptors.csv"]
            + ["--column", "sphericity", "--channel", "cytoplasm", "--out", f"{r}/ev"]
            + c
        ),
        dispatch(
            ["erk-ratio", "--signal", f"{r}/round/round_00000.signal.mvol", "--morphology", f"{r}/round/round_00000.mvol"]
            + ["--shift-unit", "--out", f"{r}/erk"]
            + c
        ),
    ]
    return codes


def all_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


# ---------------------------------------------------------------- criterion report

RESULTS = {}
TITLES = {
    1: "gradient fidelity",
    2: "quantisation oracle",
    3: "forward diffusion marginal",
    4: "FID oracle",
    5: "k-NN metric oracle",
    6: "CI / KS / Pearson oracles",
    7: "geometry oracle",
    8: "ERK ratio",
    9: "stage-1 end to end",
    10: "stage-2 end to end",
    11: "bridging direction",
    12: "relationship recall fixtures",
    13: "reproducibility",
}


def record(n, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {TITLES[n]}: {detail}"
    RESULTS[n] = line
    print(line)
    return ok


def summary_lines():
    return [RESULTS.get(n, f"criterion {n:2d} FAIL  {TITLES[n]}: not run (deselected or errored before reporting)") for n in sorted(TITLES)]
