"""Ordering experiment harness: MS+PBp vs FLIM+PBp vs MS+FT (and FBp diag)."""
import sys, time
import numpy as np
from flimseg.phantom import PhantomSpec, generate_case, synth_markers
from flimseg.patches import marker_stats_pooled
from flimseg.msflim import RunParams, run_msflim_step, oracle_select, finalize_bank
from flimseg.encoder import EncoderSpec, LayerSpec, build_encoder
from flimseg import sunet
from flimseg.metrics import score_case

GRID = [(5, 5), (5, 20), (5, 50), (10, 5), (10, 20), (10, 50)]
REGIONS = {"FLAIR": ("ed_saturated", "ed_intermediate"), "T1Gd": ("et", "nc")}
SCORED = {"FLAIR": ("ed_saturated", "ed_intermediate", "healthy"),
          "T1Gd": ("et", "nc", "healthy")}


def build_banks(spec, marked, target=16, check_tau=False):
    encoders = {"ms": {}, "flim": {}}
    taus = {}
    for modality in ("FLAIR", "T1Gd"):
        vols = [(c.flair if modality == "FLAIR" else c.t1gd) for c in marked]
        marks = [synth_markers(c, 30, seed=spec.seed)[modality] for c in marked]
        stats = marker_stats_pooled(vols, marks)
        runs = [run_msflim_step(vols, marks, RunParams(n1, n2, seed=100 + ri),
                                run_id=f"{modality}-{ri}", stats=stats)
                for ri, (n1, n2) in enumerate(GRID)]
        images = {c.case_id: v for c, v in zip(marked, vols)}
        def masks_for(c):
            out = {k: c.regions[k] for k in REGIONS[modality]}
            out["healthy"] = c.labels.data == 0
            return out
        regmasks = {c.case_id: masks_for(c) for c in marked}
        ledger = oracle_select(runs, images, regmasks, target_bank_size=target,
                               coverage_regions=REGIONS[modality])
        if check_tau:
            from flimseg.msflim import score_all_candidates
            scores = score_all_candidates(runs, images, regmasks)
            for r in REGIONS[modality]:
                taus[r] = round(max(per.get(r, 0.0) for per in scores.values()), 3)
        bank = finalize_bank(runs, ledger, stats)
        enc_spec = EncoderSpec((LayerSpec(pca_out=target), LayerSpec(pca_out=32), LayerSpec(pca_out=64)))
        encoders["ms"][modality] = build_encoder(vols, marks, enc_spec, layer1_bank=bank, seed=11)
        encoders["flim"][modality] = build_encoder(vols, marks, enc_spec, seed=11)
    return encoders, taus


def wt_scores(model, cases):
    return [score_case(sunet.predict_labels(model, c.flair, c.t1gd), c.labels)["wt"] for c in cases]


def run_arm(encoders, kind, regime, train_cases, test_cases, seed, epochs):
    if kind == "random":
        model = sunet.init_plain_model(sunet.SunetConfig(encoder_widths=(16, 32, 64)), seed=seed)
    else:
        model = sunet.init_flim_model(encoders[kind], seed=seed)
    tc = sunet.TrainConfig(epochs=epochs, seed=seed)
    trained, curve = sunet.train(model, train_cases, tc, regime=regime)
    return float(np.mean(wt_scores(trained, test_cases))), curve[-1]["mean_loss"]


if __name__ == "__main__":
    seeds = [int(s) for s in sys.argv[1].split(",")] if len(sys.argv) > 1 else [1]
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 100
    arms = sys.argv[3].split(",") if len(sys.argv) > 3 else ["ms_pbp", "flim_pbp", "ms_ft", "fbp"]
    spec = PhantomSpec(size=32, seed=7, level_jitter=0.20, healthy_texture_amp=0.15,
                       noise_sigma=0.03, bias_amplitude=0.10,
                       distractor_count=(2, 5), cyst_count=(1, 4), rim_gap_fraction=0.35)
    cases = [generate_case(spec, i) for i in range(14)]
    marked, test = cases[:8], cases[10:]
    t0 = time.time()
    encoders, taus = build_banks(spec, marked, check_tau=True)
    print(f"banks: {time.time()-t0:.0f}s taus={taus}", flush=True)
    results = {}
    for seed in seeds:
        for arm in arms:
            kind, regime = {
                "ms_pbp": ("ms", "pbp"), "flim_pbp": ("flim", "pbp"),
                "ms_ft": ("ms", "ft"), "fbp": ("random", "fbp"),
            }[arm]
            t0 = time.time()
            wt, last_loss = run_arm(encoders, kind, regime, marked, test, seed, epochs)
            results.setdefault(arm, []).append(wt)
            print(f"seed{seed} {arm}: WT {wt:.4f} (loss {last_loss:.4f}, {time.time()-t0:.0f}s)", flush=True)
    for arm, vals in results.items():
        print(f"{arm}: mean {np.mean(vals):.4f} {['%.4f' % v for v in vals]}")
