//! Acceptance gate: prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails or overruns its time budget.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viewpoint_cli::config::RunConfig;
use viewpoint_core::aggregate::{fuse_group, select_bin_integral, select_bin_max_activation, BoundingBox, Detection, Group};
use viewpoint_core::avp::{mean_avp, match_and_score, AvpOptions, GroundTruthObject, ScoredPrediction};
use viewpoint_core::gradcheck::{grad_check, GradCheckOptions, LossKind};
use viewpoint_core::losses::{geometric_loss, geometric_weights, GeometricLossParams};
use viewpoint_core::sampler::{CurriculumSchedule, LabeledPool, PoolItem, TripletSampler};
use viewpoint_core::toytrain::synth::{TEST_STREAM, TRAIN_STREAM};
use viewpoint_core::toytrain::{evaluate_toy, LossConfig, Trainer, TrainingData};
use viewpoint_core::viewgeom::{
    flip_azimuth, flip_distribution, AzimuthDeg, BinIndex, BinScheme, ClassIndex, ViewpointDistribution,
};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(1000).run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

/// Published per-class AVP row (aero .. tv) whose reported mean is 45.9.
const PUBLISHED_CLASS_AVP: [f64; 11] = [47.7, 42.5, 23.8, 74.8, 54.7, 25.9, 42.8, 43.5, 46.3, 54.6, 47.9];

fn c1_table_mean() -> Outcome {
    let m = mean_avp(&PUBLISHED_CLASS_AVP);
    ensure((m - 45.9).abs() <= 0.05, || format!("mean {m}"))?;
    Ok(format!("mean {m:.4}"))
}

fn c2_geometric_constants() -> Outcome {
    let params = GeometricLossParams::default();
    ensure(params.sigma == 3.0, || format!("default sigma {}", params.sigma))?;
    for gt in [0usize, 90, 358] {
        let (w, _) = geometric_weights(ClassIndex::new(gt).unwrap(), &params);
        for k in [(gt + 3) % 360, (gt + 357) % 360] {
            let err = (w[k] - (-1f64).exp()).abs();
            ensure(err <= 1e-12, || format!("weight at offset 3 from {gt}: {} (err {err:e})", w[k]))?;
        }
    }
    let mut worst = 0f64;
    for gt in [0usize, 17, 180, 359] {
        let l = geometric_loss(&ViewpointDistribution::uniform(), ClassIndex::new(gt).unwrap(), &params)
            .map_err(|e| e.to_string())?
            .value;
        worst = worst.max((l - 360f64.ln()).abs());
    }
    ensure(worst <= 1e-9, || format!("uniform loss off ln 360 by {worst:e}"))?;
    Ok(format!("uniform loss err {worst:.1e}"))
}

fn c3_gradients() -> Outcome {
    let opts = GradCheckOptions::default();
    ensure(opts.trials >= 100 && opts.step == 1e-5 && opts.tolerance == 1e-5, || format!("{opts:?}"))?;
    let mut worst = 0f64;
    for kind in LossKind::ALL {
        let r = grad_check(kind, &opts);
        ensure(r.passed() && r.trials >= 100, || format!("{}: max rel err {:e}", kind.name(), r.max_rel_err))?;
        worst = worst.max(r.max_rel_err);
    }
    // the check itself must be able to fail
    let corrupt = GradCheckOptions {
        corrupt: true,
        trials: 5,
        ..opts
    };
    for kind in LossKind::ALL {
        ensure(!grad_check(kind, &corrupt).passed(), || format!("{}: corrupted gradient passed", kind.name()))?;
    }
    Ok(format!("5 losses x {} trials, max rel err {worst:.1e}", opts.trials))
}

/// Probability vector with entries on a 1/1024 grid, so sums of its products
/// with 1/256-grid scores are exact in binary floating point.
fn dyadic_distribution() -> impl Strategy<Value = ViewpointDistribution> {
    proptest::collection::vec(0usize..360, 1..64).prop_map(|cuts| {
        let mut counts = vec![0u32; 360];
        let mut left = 1024u32;
        for (i, &k) in cuts.iter().enumerate() {
            let take = if i + 1 == cuts.len() { left } else { left / 2 };
            counts[k] += take;
            left -= take;
        }
        ViewpointDistribution::new(counts.iter().map(|&c| c as f64 / 1024.0).collect()).unwrap()
    })
}

fn c4_involutions() -> Outcome {
    property("flip_azimuth on dyadic grid", 0u32..360 * 4096, |t| {
        let a = AzimuthDeg::new(t as f64 / 4096.0);
        prop_assert_eq!(flip_azimuth(flip_azimuth(a)), a);
        Ok(())
    })?;
    property("class flip", 0usize..360, |k| {
        let c = ClassIndex::new(k).unwrap();
        prop_assert_eq!(c.flip().flip(), c);
        prop_assert_eq!(c.flip().get(), (360 - k) % 360);
        Ok(())
    })?;
    property("flip_azimuth on arbitrary reals", 0f64..360.0, |x| {
        let a = AzimuthDeg::new(x);
        let back = flip_azimuth(flip_azimuth(a)).value();
        // 360 - x rounds, so off the dyadic grid the round trip is exact to one ulp of 360
        prop_assert!((back - x).abs() <= 360f64 * f64::EPSILON || (back - x).abs() >= 360.0 - 1e-9);
        Ok(())
    })?;
    property("flip_distribution", proptest::collection::vec(0f64..10.0, 360), |q| {
        let d = ViewpointDistribution::new(q).unwrap();
        prop_assert_eq!(flip_distribution(&flip_distribution(&d)), d);
        Ok(())
    })?;
    property("softmax normalization", proptest::collection::vec(-60f64..60.0, 360), |z| {
        let s = ViewpointDistribution::softmax(&z).unwrap();
        prop_assert!((s.sum() - 1.0).abs() <= 1e-9);
        prop_assert!(s.as_slice().iter().all(|&p| p >= 0.0));
        Ok(())
    })?;
    let detection = (dyadic_distribution(), 0u32..=256).prop_map(|(viewpoint, m)| Detection {
        bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        class_id: 0,
        class_score: m as f64 / 256.0,
        viewpoint,
    });
    property("fusion mass", proptest::collection::vec(detection, 1..7), |dets| {
        let f = fuse_group(&dets, &Group { members: (0..dets.len()).collect() }).unwrap();
        let total: f64 = f.score.iter().sum();
        let expected: f64 = dets.iter().map(|d| d.class_score).sum();
        prop_assert_eq!(total, expected);
        Ok(())
    })?;
    Ok("6 properties x 1000 cases".into())
}

// Brute-force AVP oracle. Shares no code with the scorer beyond the record types.

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = overlap(a.x, a.x + a.w, b.x, b.x + b.w) * overlap(a.y, a.y + a.h, b.y, b.y + b.h);
    if inter == 0.0 {
        0.0
    } else {
        inter / (a.w * a.h + b.w * b.h - inter)
    }
}

/// Centered 15° bins: bin `b` holds the integer classes within 7 of `15 b`.
fn oracle_bin(az: f64) -> usize {
    let k = az.floor() as i64;
    (0..24).find(|b: &i64| (k - 15 * b).rem_euclid(360) <= 7 || (k - 15 * b).rem_euclid(360) >= 353).unwrap() as usize
}

/// Enumerates every assignment of predictions to ground truth (or to nothing)
/// that respects consumption, keeps the lexicographically best by IoU in
/// confidence order, and integrates the resulting precision staircase.
fn oracle_avp(preds: &[ScoredPrediction], gts: &[GroundTruthObject], thr: f64, wrong_bin_consumes: bool) -> f64 {
    let positives = gts.iter().filter(|g| !g.difficult).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let p: Vec<&ScoredPrediction> = order.iter().map(|&i| &preds[i]).collect();
    // candidate ground truths per prediction: same image and IoU at or above threshold
    let cands: Vec<Vec<(usize, f64)>> = p
        .iter()
        .map(|q| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| g.image_id == q.image_id)
                .map(|(gi, g)| (gi, oracle_iou(&q.bbox, &g.bbox)))
                .filter(|&(_, o)| o >= thr)
                .collect()
        })
        .collect();
    let correct_bin = |i: usize, g: usize| oracle_bin(gts[g].azimuth.value()) == p[i].predicted_bin.get();

    let n = p.len();
    let radix: Vec<usize> = cands.iter().map(|c| c.len() + 1).collect();
    let total: usize = radix.iter().product();
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    for code in 0..total {
        let mut c = code;
        let mut assign = Vec::with_capacity(n);
        for r in &radix {
            let digit = c % r;
            c /= r;
            assign.push(digit);
        }
        let chosen: Vec<Option<(usize, f64)>> = (0..n).map(|i| assign[i].checked_sub(1).map(|d| cands[i][d])).collect();
        // a ground truth is unavailable after the prediction that consumed it
        let feasible = (0..n).all(|i| match chosen[i] {
            None => true,
            Some((g, _)) => !(0..i).any(|j| {
                chosen[j].is_some_and(|(h, _)| h == g) && !gts[g].difficult && (wrong_bin_consumes || correct_bin(j, g))
            }),
        });
        if !feasible {
            continue;
        }
        let key: Vec<f64> = chosen.iter().map(|c| c.map_or(-1.0, |(_, o)| o)).collect();
        if best.as_ref().is_none_or(|(k, _)| key.partial_cmp(k) == Some(std::cmp::Ordering::Greater)) {
            best = Some((key, chosen.iter().map(|c| c.map(|(g, _)| g)).collect()));
        }
    }
    let (_, assignment) = best.expect("the empty assignment is always feasible");

    let (mut tp, mut counted) = (0usize, 0usize);
    let mut curve: Vec<(usize, f64)> = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        match a {
            Some(g) if gts[*g].difficult => continue,
            Some(g) if correct_bin(i, *g) => tp += 1,
            _ => {}
        }
        counted += 1;
        curve.push((tp, tp as f64 / counted as f64));
    }
    // each recall step 1/P is worth the best precision reached at that recall or beyond
    (1..=tp)
        .map(|level| {
            let height = curve.iter().filter(|(t, _)| *t >= level).map(|(_, pr)| *pr).fold(0.0, f64::max);
            height / positives as f64
        })
        .sum()
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), rng.random_range(5.0..30.0), rng.random_range(5.0..30.0))
        .unwrap()
}

fn c5_avp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = ["a", "b"];
    let (mut nonzero, mut total_preds) = (0, 0);
    for case in 0..500 {
        let gts: Vec<GroundTruthObject> = (0..rng.random_range(0..=4))
            .map(|_| GroundTruthObject {
                image_id: images[rng.random_range(0..2)].into(),
                class_id: 0,
                bbox: random_box(&mut rng),
                azimuth: AzimuthDeg::new(rng.random_range(0.0..360.0)),
                difficult: rng.random_bool(0.2),
            })
            .collect();
        let preds: Vec<ScoredPrediction> = (0..rng.random_range(0..=6))
            .map(|_| {
                let near = (!gts.is_empty() && rng.random_bool(0.7)).then(|| &gts[rng.random_range(0..gts.len())]);
                let (image, bbox, bin) = match near {
                    Some(g) => {
                        let j = |rng: &mut ChaCha8Rng| rng.random_range(-4.0..4.0);
                        let b = BoundingBox::new(g.bbox.x + j(&mut rng), g.bbox.y + j(&mut rng), g.bbox.w, g.bbox.h + j(&mut rng)).unwrap();
                        let bin = if rng.random_bool(0.6) { oracle_bin(g.azimuth.value()) } else { rng.random_range(0..24) };
                        (g.image_id.clone(), b, bin)
                    }
                    None => (images[rng.random_range(0..2)].to_string(), random_box(&mut rng), rng.random_range(0..24)),
                };
                ScoredPrediction {
                    image_id: image,
                    class_id: 0,
                    bbox,
                    confidence: rng.random_range(0.0..1.0),
                    predicted_bin: BinIndex(bin),
                }
            })
            .collect();
        total_preds += preds.len();
        let opts = AvpOptions {
            wrong_bin_consumes: rng.random_bool(0.5),
            ..AvpOptions::default()
        };
        let got = match_and_score(&preds, &gts, &opts).avp;
        let want = oracle_avp(&preds, &gts, opts.iou_threshold, opts.wrong_bin_consumes);
        ensure((got - want).abs() <= 1e-12, || format!("case {case}: scorer {got}, oracle {want}"))?;
        if want > 0.0 {
            nonzero += 1;
        }
    }
    ensure(nonzero >= 100, || format!("only {nonzero} instances with nonzero AVP"))?;
    Ok(format!("500 instances, {total_preds} predictions, {nonzero} with nonzero AVP"))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn c6_sampler_statistics() -> Outcome {
    const N: usize = 100_000;
    // one class on a 0.5° grid: negatives land within 0.25° of their drawn target
    let items: Vec<PoolItem> = (0..720)
        .map(|i| PoolItem {
            sample_id: i,
            class_id: 0,
            azimuth: AzimuthDeg::new(i as f64 * 0.5),
        })
        .collect();
    let schedule = CurriculumSchedule {
        easy_triplets: N as u64,
        ..CurriculumSchedule::default()
    };
    let mut sampler = TripletSampler::new(LabeledPool::new(items), schedule, 6).map_err(|e| e.to_string())?;
    let mut offsets = [Vec::with_capacity(N), Vec::with_capacity(N)];
    for phase in &mut offsets {
        for _ in 0..N {
            let t = sampler.next_labeled().map_err(|e| e.to_string())?;
            let d = (t.reference as f64 - t.negative as f64).abs() * 0.5;
            phase.push(d.min(360.0 - d));
        }
    }
    let (em, es) = mean_std(&offsets[0]);
    let (hm, hs) = mean_std(&offsets[1]);
    ensure((em - 100.0).abs() <= 1.0 && (es - 20.0).abs() <= 1.0, || format!("phase 1 mean {em:.3} std {es:.3}"))?;
    ensure((hm - 15.0).abs() <= 0.2 && (hs - 2.0).abs() <= 0.2, || format!("phase 2 mean {hm:.3} std {hs:.3}"))?;
    Ok(format!("phase 1 {em:.2}/{es:.2}, phase 2 {hm:.3}/{hs:.3}"))
}

fn c7_toy_end_to_end() -> Outcome {
    let cfg = RunConfig::default();
    let gen = cfg.generator();
    ensure(gen.noise_std == 0.05 && gen.symmetry == [0.0], || format!("default generator {gen:?}"))?;
    let train = gen.generate_split(cfg.generator.train_samples, TRAIN_STREAM, gen.noise_std).map_err(|e| e.to_string())?;
    let test = gen.generate_split(cfg.generator.test_samples, TEST_STREAM, gen.noise_std).map_err(|e| e.to_string())?;
    let tc = cfg.train_config(LossConfig::Geometric);
    let data = TrainingData::build(&gen, &train, 0, &tc).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&tc, &data).map_err(|e| e.to_string())?;
    trainer.run().map_err(|e| e.to_string())?;
    let opts = cfg.avp_options().map_err(|e| e.to_string())?;
    ensure(cfg.jitter().iou == 1.0, || "default boxes are not exact".into())?;
    let e = evaluate_toy(trainer.model(), &test, 0, &cfg.jitter(), cfg.eval.selection, &opts).map_err(|e| e.to_string())?;
    ensure(e.bin_accuracy > 0.8, || format!("bin accuracy {}", e.bin_accuracy))?;
    ensure((e.avp - e.bin_accuracy).abs() < 0.02, || format!("AVP {} vs accuracy {}", e.avp, e.bin_accuracy))?;
    Ok(format!("{} iterations, accuracy {:.4}, AVP {:.4}", tc.total_iterations(), e.bin_accuracy, e.avp))
}

/// A broad plateau filling one bin plus a narrow spike in another: the spike
/// holds the single largest score, the plateau the larger bin mass.
fn bimodal(plateau_bin: usize, spike_bin: usize, ratio: f64, spike_offset: usize) -> Vec<f64> {
    let mut score = vec![0.0005; 360];
    let plateau_mass = 0.6;
    for j in 0..15 {
        score[(15 * plateau_bin + 353 + j) % 360] = plateau_mass / 15.0;
    }
    let spike_mass = plateau_mass / ratio;
    let shoulder = 0.001;
    for j in 0..15 {
        score[(15 * spike_bin + 353 + j) % 360] = shoulder;
    }
    score[(15 * spike_bin + 353 + spike_offset) % 360] = spike_mass - 14.0 * shoulder;
    score
}

fn c8_integral_selection() -> Outcome {
    let scheme = BinScheme::default();
    let mut cases = 0;
    for plateau in [0usize, 3, 6, 9, 17, 21] {
        // a symmetric class confuses a view with the opposite side or its mirror image
        let mirror = (24 - plateau) % 24;
        let spikes = [(plateau + 12) % 24, if mirror == plateau { (plateau + 1) % 24 } else { mirror }];
        for (s, &spike) in spikes.iter().enumerate() {
            for (r, ratio) in [1.5, 2.0, 3.0].into_iter().enumerate() {
                let score = bimodal(plateau, spike, ratio, (5 * s + 3 * r) % 15);
                let masses = viewpoint_core::aggregate::bin_masses(&score, &scheme);
                ensure(masses[plateau] / masses[spike] >= 1.5 - 1e-12, || format!("case {cases}: ratio {}", masses[plateau] / masses[spike]))?;
                let integral = select_bin_integral(&score, &scheme).map_err(|e| e.to_string())?.0;
                let max = select_bin_max_activation(&score, &scheme).map_err(|e| e.to_string())?;
                ensure(integral == BinIndex(plateau), || format!("case {cases}: integral chose {integral:?}, plateau {plateau}"))?;
                ensure(max == BinIndex(spike), || format!("case {cases}: max activation chose {max:?}, spike {spike}"))?;
                cases += 1;
            }
        }
    }
    ensure(cases >= 20, || format!("only {cases} cases"))?;
    Ok(format!("{cases} constructed cases"))
}

const DETERMINISM_CONFIG: &str = r#"
schedule_scale = 0.0002
[generator]
classes = ["car", "boat"]
symmetry = [0.0, 1.0]
train_samples = 400
test_samples = 200
[train]
log_interval = 2
"#;

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_viewpoint")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    ensure(o.status.success(), || format!("viewpoint {args:?}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    fs::write(p.join("run.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    for run in ["one", "two"] {
        cli(p, &["synth", "--config", "run.toml", "--seed", "3", "--out", run])?;
        cli(p, &["train", "--config", "run.toml", "--seed", "3", "--out", run])?;
        let (pred, gt, out) = (format!("{run}/predictions.jsonl"), format!("{run}/test.jsonl"), format!("{run}/eval"));
        cli(p, &["eval", "--predictions", &pred, "--ground-truth", &gt, "--out", &out])?;
    }
    let files = ["train_log.csv", "predictions.jsonl", "eval/eval.csv"];
    for f in files {
        let a = fs::read(p.join("one").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(p.join("two").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(!a.is_empty() && a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} identical across two runs", files.join(", ")))
}

fn main() {
    let ms = Duration::from_secs(1);
    let criteria: [Criterion; 9] = [
        (1, "table mean regression", c1_table_mean, ms),
        (2, "geometric loss constants", c2_geometric_constants, ms),
        (3, "gradient suite", c3_gradients, Duration::from_secs(10)),
        (4, "involution and normalization", c4_involutions, Duration::from_secs(30)),
        (5, "AVP oracle equivalence", c5_avp_oracle, Duration::from_secs(30)),
        (6, "sampler statistics", c6_sampler_statistics, Duration::from_secs(5)),
        (7, "toy end-to-end", c7_toy_end_to_end, Duration::from_secs(120)),
        (8, "integral bin selection", c8_integral_selection, ms),
        (9, "determinism", c9_determinism, Duration::from_secs(120)),
    ];
    // silence the default hook; panics are reported as FAIL lines instead
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|d| if elapsed <= budget { Ok(d) } else { Err(format!("{d}; over the {budget:?} budget")) });
        match result {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
