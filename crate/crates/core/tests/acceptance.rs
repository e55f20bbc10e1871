//! Acceptance suite: eight end-to-end criteria, one pass/fail line each.
//!
//! Each test prints a single `[PASS] criterion N: ...` line on success; a
//! failing criterion panics with a `[FAIL]` line instead.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use radhop::classifier::ClassifierConfig;
use radhop::config::PipelineConfig;
use radhop::eval::{auroc, lesion_average_precision, Detection};
use radhop::net::{make_loss, run_gradcheck, Network, Shape};
use radhop::phantom::generate_dataset;
use radhop::pipeline::{evaluate, fit_stage1, fit_stage2, fit_stage2_multi, infer};
use radhop::roipatch::{prediction_to_residue, residue_to_target};
use radhop::saab::{apply_saab, fit_saab};
use radhop::volume::MaskVolume;

fn pass(line: &str) {
    println!("[PASS] {line}");
}

macro_rules! check {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            panic!("[FAIL] {}", format!($($msg)*));
        }
    };
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_gradient_check() {
    let start = Instant::now();
    let seeds = 30u64;
    let mut max_err = 0.0f64;
    let mut reports = 0usize;
    for seed in 0..seeds {
        for report in run_gradcheck(seed).unwrap() {
            check!(
                report.passed,
                "criterion 1: gradcheck seed {seed} loss {} max_rel_err {:.3e} exceeds {:.1e}",
                report.loss,
                report.max_rel_err,
                report.tolerance
            );
            max_err = max_err.max(report.max_rel_err);
            reports += 1;
        }
    }
    let elapsed = start.elapsed();
    check!(
        elapsed.as_secs_f64() < 120.0,
        "criterion 1: gradcheck took {:.1}s, budget 120s",
        elapsed.as_secs_f64()
    );
    pass(&format!(
        "criterion 1: analytic gradients match finite differences over {seeds} seeds \
         ({reports} loss configs, max rel err {max_err:.3e}, {:.1}s)",
        elapsed.as_secs_f64()
    ));
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_saab_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let dim = 36; // 6x6 patches
    let n = 1200;
    let patches: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let k = fit_saab(&patches, dim, dim - 1).unwrap();

    // DC kernel is the constant unit vector
    let dc = k.dc_kernel();
    for &v in &dc {
        check!(
            (v - 1.0 / (dim as f64).sqrt()).abs() < 1e-12,
            "criterion 2: DC kernel entry {v} != 1/sqrt({dim})"
        );
    }
    // AC kernels are orthonormal and orthogonal to DC
    for i in 0..k.kept {
        let ri = k.ac_row(i);
        let dc_dot: f64 = ri.iter().map(|v| v / (dim as f64).sqrt()).sum();
        check!(
            dc_dot.abs() < 1e-9,
            "criterion 2: AC kernel {i} not orthogonal to DC ({dc_dot:.2e})"
        );
        for j in i..k.kept {
            let dot: f64 = ri.iter().zip(k.ac_row(j)).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            check!(
                (dot - want).abs() < 1e-9,
                "criterion 2: AC kernels {i},{j} dot {dot:.2e}, want {want}"
            );
        }
    }
    // energies are non-increasing
    for w in k.energies.windows(2) {
        check!(
            w[0] >= w[1] - 1e-12,
            "criterion 2: energies not sorted: {} < {}",
            w[0],
            w[1]
        );
    }
    // per-patch: coefficient 0 is the DC projection and the transform
    // preserves the patch norm when all channels are kept
    for p in 0..n {
        let patch = &patches[p * dim..(p + 1) * dim];
        let coeffs = apply_saab(&k, patch).unwrap();
        let dc_proj: f64 = patch.iter().map(|v| v / (dim as f64).sqrt()).sum();
        check!(
            (coeffs[0] - dc_proj).abs() < 1e-9,
            "criterion 2: patch {p} DC coefficient {} != projection {dc_proj}",
            coeffs[0]
        );
        if k.kept == dim - 1 {
            let pn: f64 = patch.iter().map(|v| v * v).sum();
            let cn: f64 = coeffs.iter().map(|v| v * v).sum();
            check!(
                (pn - cn).abs() < 1e-6 * pn.max(1.0),
                "criterion 2: patch {p} norm not preserved: {pn} vs {cn}"
            );
        }
    }
    pass(&format!(
        "criterion 2: Saab invariants (DC form, orthonormality, energy order, \
         norm preservation) hold on {n} patches with {} AC channels",
        k.kept
    ));
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_loss_semantics() {
    // gamma = 0 reduces the weighted loss to plain MSE
    let wr0 = make_loss("wrmse", 0.0).unwrap();
    let mse = make_loss("mse", 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let n = 10_000;
    let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    for i in 0..n {
        let mut ga = [0.0];
        let mut gb = [0.0];
        let la = wr0.batch(&preds[i..=i], &targets[i..=i], &mut ga);
        let lb = mse.batch(&preds[i..=i], &targets[i..=i], &mut gb);
        check!(
            (la - lb).abs() < 1e-12 && (ga[0] - gb[0]).abs() < 1e-12,
            "criterion 3: gamma=0 wrmse != mse at pair {i}: {la} vs {lb}"
        );
    }

    // the weight grows monotonically with the target for every gamma > 0
    for gamma in [0.5, 0.95, 2.0] {
        let mut prev = f64::NEG_INFINITY;
        for s in 0..1000 {
            let t = 1e-4 + (1.0 - 2e-4) * (s as f64 / 999.0);
            let w = (-t.ln()).powf(-gamma);
            check!(
                w > prev,
                "criterion 3: weight not increasing at t={t}, gamma={gamma}"
            );
            prev = w;
        }
    }

    // frozen scalar oracle: gamma=0.95, t=0.85, prediction 0.95
    let wr = make_loss("wrmse", 0.95).unwrap();
    let mut g = [0.0];
    let loss = wr.batch(&[0.95], &[0.85], &mut g);
    let weight = (-(0.85f64).ln()).powf(-0.95);
    check!(
        (weight - 5.618_769_866_827_31).abs() < 1e-6,
        "criterion 3: weight oracle mismatch: {weight}"
    );
    check!(
        (loss - 0.056_187_698_668_273_1).abs() < 1e-6,
        "criterion 3: loss oracle mismatch: {loss}"
    );
    pass(&format!(
        "criterion 3: wrmse(gamma=0) == mse on {n} pairs, weight monotone for \
         gamma in {{0.5, 0.95, 2}}, scalar oracle within 1e-6"
    ));
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_network_architecture() {
    let net = Network::radhopnet(60, 0);
    check!(
        net.param_count() == 54_577,
        "criterion 4: parameter count {} != 54577",
        net.param_count()
    );
    check!(
        net.params.len() == 54_577,
        "criterion 4: parameter vector length {}",
        net.params.len()
    );
    // spatial trace: five valid 3x3 convolutions shrink 13 -> 3, then flatten
    let spatial: Vec<(usize, usize, usize)> = net
        .shapes
        .iter()
        .filter_map(|s| match s {
            Shape::Map { c, h, w } => Some((*c, *h, *w)),
            Shape::Flat { .. } => None,
        })
        .collect();
    let conv_maps: Vec<(usize, usize, usize)> = {
        let mut seen = vec![spatial[0]];
        for &m in &spatial[1..] {
            if m != *seen.last().unwrap() {
                seen.push(m);
            }
        }
        seen
    };
    let want = [
        (60, 13, 13),
        (24, 11, 11),
        (24, 9, 9),
        (24, 7, 7),
        (24, 5, 5),
        (32, 3, 3),
    ];
    check!(
        conv_maps == want,
        "criterion 4: spatial trace {conv_maps:?} != {want:?}"
    );
    let vec_dims: Vec<usize> = {
        let mut seen = Vec::new();
        for s in &net.shapes {
            if let Shape::Flat { d } = s {
                if seen.last() != Some(d) {
                    seen.push(*d);
                }
            }
        }
        seen
    };
    check!(
        vec_dims == [288, 64, 8, 1],
        "criterion 4: dense trace {vec_dims:?} != [288, 64, 8, 1]"
    );
    pass(
        "criterion 4: network has exactly 54577 parameters and the published \
         spatial trace 13->11->9->7->5->3 with dense head 288->64->8->1",
    );
}

// ---------------------------------------------------------------- criterion 5

/// Exhaustive pair-enumeration AUROC.
fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            if li == lj {
                continue;
            }
            den += 1.0;
            let (p, n) = if li > lj { (si, sj) } else { (sj, si) };
            num += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Brute-force AP by prefix enumeration: for every lesion, recompute from
/// scratch the precision of the shortest detection prefix that matches it.
fn ap_oracle(detections: &[Detection], masks: &[Option<&MaskVolume>]) -> f64 {
    let mut ranked: Vec<&Detection> = detections.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.case_idx.cmp(&b.case_idx))
            .then(a.peak.cmp(&b.peak))
    });
    let lesion_of = |d: &Detection| -> Option<(usize, u16)> {
        let m = masks[d.case_idx]?;
        let id = m.at(d.peak[0] as usize, d.peak[1] as usize, d.peak[2] as usize);
        (id > 0).then_some((d.case_idx, id))
    };
    let n_lesions: usize = masks
        .iter()
        .filter_map(|m| m.map(|m| m.max_label() as usize))
        .sum();
    if n_lesions == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    // for each prefix length, replay the whole greedy matching from scratch
    for k in 1..=ranked.len() {
        let mut matched: Vec<(usize, u16)> = Vec::new();
        let mut counted = 0usize; // TPs + FPs (duplicates excluded)
        let mut tp = 0usize;
        let mut last_is_new_tp = false;
        for d in &ranked[..k] {
            match lesion_of(d) {
                Some(key) if !matched.contains(&key) => {
                    matched.push(key);
                    tp += 1;
                    counted += 1;
                    last_is_new_tp = true;
                }
                Some(_) => last_is_new_tp = false, // duplicate: discarded
                None => {
                    counted += 1;
                    last_is_new_tp = false;
                }
            }
        }
        if last_is_new_tp {
            total += tp as f64 / counted as f64;
        }
    }
    total / n_lesions as f64
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);

    // AUROC vs pair enumeration, n up to 200, heavy ties
    let mut auroc_trials = 0;
    for _ in 0..40 {
        let n = rng.gen_range(2..=200);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            check!(
                auroc(&scores, &labels).is_none(),
                "criterion 5: single-class AUROC must be undefined"
            );
            continue;
        }
        let fast = auroc(&scores, &labels).unwrap();
        let slow = auroc_oracle(&scores, &labels);
        check!(
            (fast - slow).abs() < 1e-12,
            "criterion 5: AUROC {fast} != pair enumeration {slow} (n={n})"
        );
        auroc_trials += 1;
    }

    // AP vs brute-force prefix enumeration on random scenes, <= 20 detections
    let mut ap_trials = 0;
    for _ in 0..60 {
        let n_cases = rng.gen_range(1..=3);
        let mut masks_owned = Vec::new();
        for _ in 0..n_cases {
            let n_lesions = rng.gen_range(0..=3u16);
            let mut values = vec![0u16; 30];
            for id in 1..=n_lesions {
                // each lesion occupies a distinct 2-voxel run
                let at = (id as usize - 1) * 8;
                values[at] = id;
                values[at + 1] = id;
            }
            masks_owned.push(MaskVolume {
                dims: (1, 1, 30),
                spacing_mm: (3.0, 0.25, 0.25),
                values,
            });
        }
        let masks: Vec<Option<&MaskVolume>> = masks_owned.iter().map(Some).collect();
        let n_dets = rng.gen_range(0..=20);
        let detections: Vec<Detection> = (0..n_dets)
            .map(|_| Detection {
                case_idx: rng.gen_range(0..n_cases),
                peak: [0, 0, rng.gen_range(0..30) as u32],
                // distinct scores keep the ranking unambiguous
                score: rng.gen_range(0..1_000_000) as f64 / 1_000_000.0,
            })
            .collect();
        if masks_owned.iter().all(|m| m.max_label() == 0) {
            continue;
        }
        let (fast, _) = lesion_average_precision(&detections, &masks).unwrap();
        let slow = ap_oracle(&detections, &masks);
        check!(
            (fast - slow).abs() < 1e-12,
            "criterion 5: AP {fast} != brute force {slow} ({n_dets} detections)"
        );
        ap_trials += 1;
    }

    // frozen worked example: ranked TP, FP, TP over two lesions -> 5/6
    let mut values = vec![0u16; 10];
    values[0] = 1;
    values[5] = 2;
    let mask = MaskVolume {
        dims: (1, 1, 10),
        spacing_mm: (3.0, 0.25, 0.25),
        values,
    };
    let dets = vec![
        Detection { case_idx: 0, peak: [0, 0, 0], score: 0.9 },
        Detection { case_idx: 0, peak: [0, 0, 3], score: 0.8 },
        Detection { case_idx: 0, peak: [0, 0, 5], score: 0.7 },
    ];
    let (ap, _) = lesion_average_precision(&dets, &[Some(&mask)]).unwrap();
    check!(
        (ap - 5.0 / 6.0).abs() < 1e-12,
        "criterion 5: worked example AP {ap} != 5/6"
    );
    pass(&format!(
        "criterion 5: AUROC matches pair enumeration ({auroc_trials} trials, n up to 200), \
         AP matches prefix brute force ({ap_trials} scenes), worked example = 5/6"
    ));
}

// ---------------------------------------------------------------- criterion 6

fn seeded_config(root: &std::path::Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data_dir = root.join(format!("s{seed}/data"));
    cfg.model_dir = root.join(format!("s{seed}/models"));
    cfg.report_dir = root.join(format!("s{seed}/reports"));
    cfg.seed = seed;
    // The published optimizer constants (batch 4096, lr 1e-4, 20 epochs)
    // assume a corpus of ~1e5 ROI samples, i.e. roughly 500 updates. The
    // 100-case corpus yields ~2.3k samples, so the literal constants give 20
    // updates and no learning; rescale to a comparable update count while
    // keeping everything else at its default.
    cfg.stage2.batch_size = 256;
    cfg.stage2.learning_rate = 3e-4;
    cfg.stage2.epochs = 40;
    cfg
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn criterion_6_end_to_end_trend() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut ap_s1 = Vec::new();
    let mut ap_wr = Vec::new();
    let mut ap_mse = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut cfg = seeded_config(dir.path(), seed);
        generate_dataset(&cfg.phantom, cfg.n_cases, cfg.split, cfg.seed, &cfg.data_dir).unwrap();
        fit_stage1(&cfg).unwrap();
        // both losses over one shared candidate-extraction pass
        fit_stage2_multi(&cfg, &["wrmse", "mse"]).unwrap();
        let ev_wr = evaluate(&cfg, false).unwrap();
        cfg.stage2.loss = "mse".to_string();
        let ev_mse = evaluate(&cfg, false).unwrap();
        println!(
            "  seed {seed}: stage1 ap {:.4}, wrmse ap {:.4}, mse ap {:.4}",
            ev_wr.stage1.lesion_ap, ev_wr.stage2.lesion_ap, ev_mse.stage2.lesion_ap
        );
        ap_s1.push(ev_wr.stage1.lesion_ap);
        ap_wr.push(ev_wr.stage2.lesion_ap);
        ap_mse.push(ev_mse.stage2.lesion_ap);
    }
    let (m1, mw, mm) = (median(ap_s1), median(ap_wr), median(ap_mse));
    let elapsed = start.elapsed().as_secs_f64();
    check!(
        elapsed < 1800.0,
        "criterion 6: run took {elapsed:.0}s, budget 1800s"
    );
    check!(
        mw >= m1 + 0.03,
        "criterion 6: median wrmse AP {mw:.4} < stage-1 AP {m1:.4} + 0.03"
    );
    check!(
        mw >= mm,
        "criterion 6: median wrmse AP {mw:.4} < mse AP {mm:.4}"
    );
    pass(&format!(
        "criterion 6: over 3 seeds x 100 cases, median lesion AP improves \
         {m1:.4} -> {mw:.4} with wrmse (mse: {mm:.4}) in {elapsed:.0}s"
    ));
}

// ---------------------------------------------------------------- criterion 7

fn tiny_config(root: &std::path::Path, seed: u64, threads: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.data_dir = root.join("data");
    cfg.model_dir = root.join("models");
    cfg.report_dir = root.join("reports");
    cfg.seed = seed;
    cfg.threads = threads;
    cfg.n_cases = 10;
    cfg.radhop.windows_per_case = 60;
    cfg.radhop.min_features = 96;
    cfg.top_k = 96;
    cfg.lnt.subset = 48;
    cfg.lnt.n_out = 6;
    cfg.stage1.pos_per_case = 100;
    cfg.stage1.neg_per_case = 200;
    cfg.stage1.stride = 8;
    cfg.stage1.classifier = ClassifierConfig {
        kind: "logistic".into(),
        ..ClassifierConfig::default()
    };
    cfg.stage2.epochs = 3;
    cfg.stage2.augmentations_per_roi = 2;
    cfg.stage2.batch_size = 64;
    cfg
}

fn run_and_fingerprint(root: &std::path::Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let cfg = tiny_config(root, 23, threads);
    generate_dataset(&cfg.phantom, cfg.n_cases, cfg.split, cfg.seed, &cfg.data_dir).unwrap();
    fit_stage1(&cfg).unwrap();
    fit_stage2(&cfg).unwrap();
    infer(&cfg).unwrap();
    evaluate(&cfg, false).unwrap();
    let mut files = Vec::new();
    for dir in [&cfg.model_dir, &cfg.report_dir] {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            files.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    files
}

#[test]
fn criterion_7_bitwise_determinism() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run_and_fingerprint(a_dir.path(), 1);
    let b = run_and_fingerprint(b_dir.path(), 8);
    check!(
        a.len() == b.len() && !a.is_empty(),
        "criterion 7: artifact sets differ in size ({} vs {})",
        a.len(),
        b.len()
    );
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        check!(na == nb, "criterion 7: artifact name mismatch {na} vs {nb}");
        check!(
            ba == bb,
            "criterion 7: artifact {na} differs between threads=1 and threads=8"
        );
    }
    pass(&format!(
        "criterion 7: {} artifacts are byte-identical across reruns with \
         threads=1 and threads=8",
        a.len()
    ));
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_residue_invariants() {
    // closed-form mapping invariants on a dense grid
    for s in 0..=2000 {
        let eps = -1.0 + 2.0 * s as f64 / 2000.0;
        let t = residue_to_target(eps);
        check!(
            (1e-4..=1.0 - 1e-4).contains(&t),
            "criterion 8: target {t} outside clamp for eps {eps}"
        );
        let back = prediction_to_residue(t);
        if (-0.999..=0.999).contains(&eps) {
            check!(
                (back - eps).abs() < 1e-9,
                "criterion 8: round trip {eps} -> {t} -> {back}"
            );
        }
    }

    // invariants over an actual phantom run
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 31, 1);
    generate_dataset(&cfg.phantom, cfg.n_cases, cfg.split, cfg.seed, &cfg.data_dir).unwrap();
    fit_stage1(&cfg).unwrap();
    fit_stage2(&cfg).unwrap();
    let results = infer(&cfg).unwrap();
    let mut n_rois = 0;
    for res in &results {
        for roi in &res.rois {
            n_rois += 1;
            let p = roi.p_roi;
            check!(
                (0.0..=1.0).contains(&p),
                "criterion 8: p_roi {p} outside [0, 1]"
            );
            let y = roi.y_roi.expect("labeled ROI") as f64;
            let eps = roi.epsilon.expect("labeled ROI");
            check!(
                (eps - (y - p)).abs() < 1e-12,
                "criterion 8: epsilon {eps} != Y - P = {}",
                y - p
            );
            check!(
                (-1.0..=1.0).contains(&eps),
                "criterion 8: epsilon {eps} outside [-1, 1]"
            );
            let eps_hat = roi.epsilon_hat.expect("inferred ROI");
            check!(
                (-1.0..=1.0).contains(&eps_hat),
                "criterion 8: epsilon_hat {eps_hat} outside [-1, 1]"
            );
            let f = roi.final_prob.expect("inferred ROI");
            check!(
                (f - (p + eps_hat).clamp(0.0, 1.0)).abs() < 1e-12,
                "criterion 8: final_prob {f} != clamp(P + eps_hat)"
            );
        }
        check!(
            (0.0..=1.0).contains(&res.patient_score),
            "criterion 8: patient score {} outside [0, 1]",
            res.patient_score
        );
    }
    check!(n_rois > 0, "criterion 8: inference produced no ROIs to check");
    pass(&format!(
        "criterion 8: residue arithmetic (eps = Y - P, clamps, round trips, \
         corrected probability) holds on a phantom run with {n_rois} ROIs"
    ));
}
