//! End-to-end orchestration: fit stage 1, fit stage 2, run inference, and
//! evaluate, all driven by one [`PipelineConfig`] and a master seed.
//!
//! Every randomized step derives its seed from the master seed and a fixed
//! salt, so reruns with the same config and seed reproduce every artifact
//! bit for bit.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    load_network, load_stage1_bundle, read_json, save_network, save_stage1_bundle, write_json,
    Stage1Bundle, STAGE1_FORMAT,
};
use crate::case::{load_manifest_cases, Case, MODALITIES};
use crate::classifier::{load_voxel_classifier, train_voxel_classifier, VoxelModel};
use crate::config::PipelineConfig;
use crate::error::{PipelineError, Result};
use crate::eval::{
    auroc, lesion_average_precision, patient_score, roc_curve, write_pr_csv, write_roc_csv,
    Detection,
};
use crate::features::{dft_score, fit_lnt, select_top_k, FeatureMatrix, FeatureSelector};
use crate::net::{
    corrected_prob, tensor_to_input, train_stage2, Cache, EpochLog, Network, TrainSample,
    ValSample,
};
use crate::preprocess::preprocess_case;
use crate::radhop::{extract_window_features, fit_radhop, RadHopModel};
use crate::roipatch::{
    prediction_to_residue, region_from_context, residue_to_target, roi_patch_from_regions,
    sample_augmentations, extract_roi_contexts, FeatureStack,
};
use crate::stage1::{build_voxel_dataset, extract_rois, label_rois, predict_heatmap, RoiRecord};

/// Per-purpose seed salts; one derived stream per randomized step.
const SALT_RADHOP: [u64; 3] = [0x11ad_0001, 0x11ad_0002, 0x11ad_0003];
const SALT_SCORING: u64 = 0xdf70_0001;
const SALT_DATASET: u64 = 0xdf70_0002;
const SALT_CLASSIFIER: u64 = 0xc1a5_0001;
const SALT_LNT: [u64; 3] = [0x1070_0001, 0x1070_0002, 0x1070_0003];
const SALT_STAGE2: u64 = 0x57a6_0002;
const SALT_AUG: u64 = 0xa060_0001;

/// Histogram resolution of the discriminability score (31 interior
/// thresholds).
const DFT_BINS: usize = 32;

/// Everything stage 1 leaves on disk, reloaded into memory.
pub struct Stage1Artifacts {
    pub bundles: [Stage1Bundle; 3],
    pub classifier: Box<dyn VoxelModel>,
}

impl Stage1Artifacts {
    pub fn models(&self) -> [RadHopModel; 3] {
        [0, 1, 2].map(|m| self.bundles[m].radhop.clone())
    }

    pub fn selectors(&self) -> [FeatureSelector; 3] {
        [0, 1, 2].map(|m| self.bundles[m].selector.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierFile {
    format: String,
    model: serde_json::Value,
}

fn classifier_path(model_dir: &Path) -> std::path::PathBuf {
    model_dir.join("classifier.json")
}

pub fn save_classifier(model_dir: &Path, clf: &dyn VoxelModel) -> Result<()> {
    write_json(
        &classifier_path(model_dir),
        &ClassifierFile {
            format: STAGE1_FORMAT.to_string(),
            model: clf.to_value(),
        },
    )
}

pub fn load_stage1_artifacts(model_dir: &Path) -> Result<Stage1Artifacts> {
    let bundles = [
        load_stage1_bundle(model_dir, &format!("stage1_{}", MODALITIES[0]))?,
        load_stage1_bundle(model_dir, &format!("stage1_{}", MODALITIES[1]))?,
        load_stage1_bundle(model_dir, &format!("stage1_{}", MODALITIES[2]))?,
    ];
    let path = classifier_path(model_dir);
    let file: ClassifierFile = read_json(&path)?;
    if file.format != STAGE1_FORMAT {
        return Err(PipelineError::parse(
            &path,
            format!("unsupported format {:?}", file.format),
        ));
    }
    let classifier = load_voxel_classifier(&file.model)?;
    Ok(Stage1Artifacts {
        bundles,
        classifier,
    })
}

fn load_split(manifest: &Path, cfg: &PipelineConfig) -> Result<Vec<Case>> {
    let cases = load_manifest_cases(manifest)?;
    cases
        .iter()
        .map(|c| preprocess_case(c, &cfg.preprocess))
        .collect()
}

/// Balanced (voxel, label) coordinates for the feature-scoring pass; a
/// smaller per-case quota than the classifier dataset keeps the raw
/// (unselected) feature matrix small.
fn scoring_coords(
    cases: &[Case],
    pos_per_case: usize,
    neg_per_case: usize,
    seed: u64,
) -> Result<Vec<(usize, usize, usize, usize, u8)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let mask = case.lesion_mask.as_ref().ok_or_else(|| {
            PipelineError::InvalidInput(format!(
                "training case {} lacks a lesion mask",
                case.case_id
            ))
        })?;
        let (nz, ny, nx) = case.dims();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if let Some(g) = &case.gland_mask {
                        if g.at(z, y, x) == 0 {
                            continue;
                        }
                    }
                    if mask.at(z, y, x) > 0 {
                        pos.push((z, y, x));
                    } else {
                        neg.push((z, y, x));
                    }
                }
            }
        }
        for (pool, quota, label) in [(pos, pos_per_case, 1u8), (neg, neg_per_case, 0u8)] {
            let take = quota.min(pool.len());
            let mut pool = pool;
            for i in 0..take {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
                let (z, y, x) = pool[i];
                out.push((ci, z, y, x, label));
            }
        }
    }
    Ok(out)
}

/// Rank raw cascade features of one modality by discriminability and keep the
/// best `top_k`.
fn fit_selector(
    cases: &[Case],
    model: &RadHopModel,
    modality: usize,
    coords: &[(usize, usize, usize, usize, u8)],
    top_k: usize,
) -> Result<FeatureSelector> {
    let f_raw = model.feature_dim();
    if f_raw < top_k {
        return Err(PipelineError::FitInfeasible(format!(
            "{}: {} raw features < top_k = {}",
            MODALITIES[modality], f_raw, top_k
        )));
    }
    let mut matrix = FeatureMatrix::zeros(coords.len(), f_raw);
    let mut labels = Vec::with_capacity(coords.len());
    for (row, &(ci, z, y, x, label)) in coords.iter().enumerate() {
        let case = &cases[ci];
        let (_, ny, nx) = case.dims();
        let raw = extract_window_features(
            model,
            case.volumes[modality].slice(z),
            ny,
            nx,
            y as i64,
            x as i64,
        );
        for (dst, v) in matrix.row_mut(row).iter_mut().zip(&raw) {
            *dst = *v as f32;
        }
        labels.push(label);
    }
    let mut scores = Vec::with_capacity(f_raw);
    let mut column = vec![0.0f64; coords.len()];
    for c in 0..f_raw {
        for (r, dst) in column.iter_mut().enumerate() {
            *dst = matrix.row(r)[c] as f64;
        }
        scores.push(dft_score(&column, &labels, DFT_BINS)?);
    }
    select_top_k(&scores, top_k)
}

/// Copy one modality's block of the concatenated feature matrix.
fn modality_block(
    matrix: &FeatureMatrix,
    selectors: &[FeatureSelector; 3],
    modality: usize,
) -> FeatureMatrix {
    let offset: usize = selectors[..modality].iter().map(|s| s.n_kept()).sum();
    let width = selectors[modality].n_kept();
    let mut block = FeatureMatrix::zeros(matrix.rows, width);
    for r in 0..matrix.rows {
        block
            .row_mut(r)
            .copy_from_slice(&matrix.row(r)[offset..offset + width]);
    }
    block
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1FitSummary {
    pub n_train_cases: usize,
    pub f_raw: [usize; 3],
    pub n_selected: [usize; 3],
    pub dataset_rows: usize,
    pub dataset_positives: usize,
    pub train_auroc: f64,
}

/// Fit the full first stage from the training manifest and write its
/// artifacts into `cfg.model_dir`.
pub fn fit_stage1(cfg: &PipelineConfig) -> Result<Stage1FitSummary> {
    let cases = load_split(&cfg.train_manifest(), cfg)?;
    if cases.is_empty() {
        return Err(PipelineError::InvalidInput(
            "training manifest is empty".into(),
        ));
    }

    let mut models = Vec::with_capacity(3);
    for m in 0..3 {
        models.push(fit_radhop(&cases, m, &cfg.radhop, cfg.seed ^ SALT_RADHOP[m])?);
    }

    // feature scoring runs on a smaller voxel sample than classifier training
    let score_pos = (cfg.stage1.pos_per_case / 4).max(1);
    let score_neg = (cfg.stage1.neg_per_case / 4).max(1);
    let coords = scoring_coords(&cases, score_pos, score_neg, cfg.seed ^ SALT_SCORING)?;
    if coords.iter().all(|c| c.4 == 0) || coords.iter().all(|c| c.4 == 1) {
        return Err(PipelineError::Degenerate(
            "feature scoring sample contains a single class".into(),
        ));
    }
    let mut selectors = Vec::with_capacity(3);
    for m in 0..3 {
        selectors.push(fit_selector(&cases, &models[m], m, &coords, cfg.top_k)?);
    }
    let models: [RadHopModel; 3] = models.try_into().map_err(|_| unreachable!()).unwrap();
    let selectors: [FeatureSelector; 3] = selectors.try_into().map_err(|_| unreachable!()).unwrap();

    let (matrix, labels) =
        build_voxel_dataset(&cases, &models, &selectors, &cfg.stage1, cfg.seed ^ SALT_DATASET)?;
    let classifier = train_voxel_classifier(
        &matrix,
        &labels,
        &cfg.stage1.classifier,
        cfg.seed ^ SALT_CLASSIFIER,
    )?;

    let train_scores: Vec<f64> = (0..matrix.rows)
        .map(|r| classifier.predict_prob(matrix.row(r)))
        .collect();
    let train_auroc = auroc(&train_scores, &labels).unwrap_or(0.5);

    let float_labels: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    std::fs::create_dir_all(&cfg.model_dir)
        .map_err(|e| PipelineError::io(&cfg.model_dir, e))?;
    let mut f_raw = [0usize; 3];
    let mut n_selected = [0usize; 3];
    for m in 0..3 {
        let block = modality_block(&matrix, &selectors, m);
        let lnt = fit_lnt(&block, &float_labels, &cfg.lnt, cfg.seed ^ SALT_LNT[m])?;
        f_raw[m] = models[m].feature_dim();
        n_selected[m] = selectors[m].n_kept();
        let bundle = Stage1Bundle {
            modality: MODALITIES[m].to_string(),
            radhop: models[m].clone(),
            selector: selectors[m].clone(),
            lnt,
        };
        save_stage1_bundle(&cfg.model_dir, &format!("stage1_{}", MODALITIES[m]), &bundle)?;
    }
    save_classifier(&cfg.model_dir, classifier.as_ref())?;

    Ok(Stage1FitSummary {
        n_train_cases: cases.len(),
        f_raw,
        n_selected,
        dataset_rows: matrix.rows,
        dataset_positives: labels.iter().filter(|&&l| l > 0).count(),
        train_auroc,
    })
}

/// Stage-1 candidates of one case: heatmap thresholding plus component
/// labels when a lesion mask is available.
pub fn case_rois(case: &Case, s1: &Stage1Artifacts, cfg: &PipelineConfig) -> Result<Vec<RoiRecord>> {
    let models = s1.models();
    let selectors = s1.selectors();
    let heatmap = predict_heatmap(
        case,
        &models,
        &selectors,
        s1.classifier.as_ref(),
        cfg.stage1.stride,
    );
    let mut rois = extract_rois(&heatmap, cfg.stage1.t_p, cfg.stage1.min_voxels);
    if let Some(mask) = &case.lesion_mask {
        label_rois(&mut rois, mask, case.dims())?;
    }
    Ok(rois)
}

fn aug_seed(master: u64, case_idx: usize, roi_id: usize) -> u64 {
    (master ^ SALT_AUG)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((case_idx as u64) << 20)
        .wrapping_add(roi_id as u64)
}

fn roi_center(roi: &RoiRecord) -> (usize, i64, i64) {
    (
        roi.peak[0] as usize,
        roi.centroid_inplane[0] as i64,
        roi.centroid_inplane[1] as i64,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2FitSummary {
    pub loss: String,
    pub n_train_rois: usize,
    pub n_train_samples: usize,
    pub n_val_rois: usize,
    pub best_val_auroc: f64,
    pub epochs: usize,
}

pub fn network_stem(loss: &str) -> String {
    format!("radhopnet_{loss}")
}

fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss,val_auroc\n");
    for row in log {
        text.push_str(&format!(
            "{},{},{}\n",
            row.epoch, row.train_loss, row.val_auroc
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| PipelineError::io(path, e))
}

/// Fit the residue regressor on stage-1 candidates from the train split,
/// selecting the epoch with the best validation AUROC, and write the network
/// plus its training log into `cfg.model_dir`.
pub fn fit_stage2(cfg: &PipelineConfig) -> Result<Stage2FitSummary> {
    let loss = cfg.stage2.loss.clone();
    let mut out = fit_stage2_multi(cfg, &[&loss])?;
    Ok(out.remove(0))
}

/// Fit one residue regressor per requested loss over a shared ROI dataset.
///
/// Candidate extraction (stage-1 heatmaps plus augmented 72x72 feature
/// tensors) dominates the cost of [`fit_stage2`] and is identical for every
/// loss, so loss comparisons should extract once and train per loss.
pub fn fit_stage2_multi(cfg: &PipelineConfig, losses: &[&str]) -> Result<Vec<Stage2FitSummary>> {
    let s1 = load_stage1_artifacts(&cfg.model_dir)?;
    let models = s1.models();
    let selectors = s1.selectors();
    let lnts = [0, 1, 2].map(|m| s1.bundles[m].lnt.clone());
    let stack = FeatureStack {
        models: &models,
        selectors: &selectors,
        lnts: &lnts,
    };

    let train_cases = load_split(&cfg.train_manifest(), cfg)?;
    let val_cases = load_split(&cfg.val_manifest(), cfg)?;

    let mut train = Vec::new();
    let mut n_train_rois = 0usize;
    for (ci, case) in train_cases.iter().enumerate() {
        if case.lesion_mask.is_none() {
            return Err(PipelineError::InvalidInput(format!(
                "training case {} lacks a lesion mask",
                case.case_id
            )));
        }
        for roi in case_rois(case, &s1, cfg)? {
            let (z, cy, cx) = roi_center(&roi);
            let epsilon = roi.epsilon.expect("labeled ROI");
            let target = residue_to_target(epsilon);
            let contexts = extract_roi_contexts(case, z, cy, cx);
            let augs = sample_augmentations(
                aug_seed(cfg.seed, ci, roi.roi_id),
                cfg.stage2.augmentations_per_roi.max(1),
            );
            for aug in &augs {
                let regions = [0, 1, 2].map(|m| region_from_context(&contexts[m], aug));
                let tensor = roi_patch_from_regions(&stack, &regions);
                train.push(TrainSample {
                    input: tensor_to_input(&tensor),
                    target,
                });
            }
            n_train_rois += 1;
        }
    }
    if train.is_empty() {
        return Err(PipelineError::Degenerate(
            "stage 1 produced no candidate ROIs on the training split; \
             nothing for stage 2 to learn from"
                .into(),
        ));
    }

    let mut val = Vec::new();
    for case in &val_cases {
        for roi in case_rois(case, &s1, cfg)? {
            let (z, cy, cx) = roi_center(&roi);
            let tensor = crate::roipatch::extract_roi_patch(&stack, case, z, cy, cx);
            val.push(ValSample {
                input: tensor_to_input(&tensor),
                p_roi: roi.p_roi,
                label: roi.y_roi.expect("labeled ROI"),
            });
        }
    }

    let n_train_samples = train.len();
    let n_val_rois = val.len();
    std::fs::create_dir_all(&cfg.model_dir)
        .map_err(|e| PipelineError::io(&cfg.model_dir, e))?;

    let mut summaries = Vec::with_capacity(losses.len());
    for &loss in losses {
        let mut train_cfg = cfg.stage2.clone();
        train_cfg.loss = loss.to_string();
        let (net, log) = train_stage2(&train, &val, &train_cfg, cfg.seed ^ SALT_STAGE2)?;
        let best_val_auroc = log
            .iter()
            .filter(|l| l.selected)
            .map(|l| l.val_auroc)
            .last()
            .unwrap_or(0.5);

        save_network(&cfg.model_dir, &network_stem(loss), &net)?;
        write_training_log(&cfg.model_dir.join(format!("log_{loss}.csv")), &log)?;

        summaries.push(Stage2FitSummary {
            loss: loss.to_string(),
            n_train_rois,
            n_train_samples,
            n_val_rois,
            best_val_auroc,
            epochs: log.len(),
        });
    }
    Ok(summaries)
}

/// Inference output for one case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    /// maximum corrected ROI probability; 0 when stage 1 found nothing
    pub patient_score: f64,
    pub rois: Vec<RoiRecord>,
}

/// Run both stages over already-preprocessed cases. ROI labels are attached
/// when a case carries a lesion mask.
pub fn run_inference(
    cases: &[Case],
    s1: &Stage1Artifacts,
    net: &Network,
    cfg: &PipelineConfig,
) -> Result<Vec<CaseResult>> {
    let models = s1.models();
    let selectors = s1.selectors();
    let lnts = [0, 1, 2].map(|m| s1.bundles[m].lnt.clone());
    let stack = FeatureStack {
        models: &models,
        selectors: &selectors,
        lnts: &lnts,
    };
    let mut cache = Cache::new(net);
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let mut rois = case_rois(case, s1, cfg)?;
        for roi in &mut rois {
            let (z, cy, cx) = roi_center(roi);
            let tensor = crate::roipatch::extract_roi_patch(&stack, case, z, cy, cx);
            let y_hat = net.predict(&tensor_to_input(&tensor), &mut cache);
            roi.epsilon_hat = Some(prediction_to_residue(y_hat));
            roi.final_prob = Some(corrected_prob(roi.p_roi, y_hat));
        }
        let finals: Vec<f64> = rois.iter().filter_map(|r| r.final_prob).collect();
        out.push(CaseResult {
            case_id: case.case_id.clone(),
            patient_score: patient_score(&finals),
            rois,
        });
    }
    Ok(out)
}

/// Load artifacts, run both stages over the test manifest, and write
/// `rois.json` into `cfg.report_dir`.
pub fn infer(cfg: &PipelineConfig) -> Result<Vec<CaseResult>> {
    let s1 = load_stage1_artifacts(&cfg.model_dir)?;
    let net = load_network(&cfg.model_dir, &network_stem(&cfg.stage2.loss))?;
    let cases = load_split(&cfg.test_manifest(), cfg)?;
    let results = run_inference(&cases, &s1, &net, cfg)?;
    std::fs::create_dir_all(&cfg.report_dir)
        .map_err(|e| PipelineError::io(&cfg.report_dir, e))?;
    write_json(&cfg.report_dir.join("rois.json"), &results)?;
    Ok(results)
}

/// Lesion AP and patient AUROC for one scoring variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub lesion_ap: f64,
    pub patient_auroc: Option<f64>,
    pub n_detections: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: String,
    pub n_cases: usize,
    pub n_lesions: usize,
    /// candidate probabilities straight from the heatmap
    pub stage1: VariantMetrics,
    /// residue-corrected probabilities
    pub stage2: VariantMetrics,
}

fn count_lesions(cases: &[Case]) -> usize {
    cases
        .iter()
        .filter_map(|c| c.lesion_mask.as_ref())
        .map(|m| m.max_label() as usize)
        .sum()
}

fn variant_metrics(
    results: &[CaseResult],
    cases: &[Case],
    score_of: impl Fn(&RoiRecord) -> f64,
) -> Result<(VariantMetrics, Vec<crate::eval::PrPoint>, Vec<crate::eval::RocPoint>)> {
    let mut detections = Vec::new();
    for (ci, res) in results.iter().enumerate() {
        for roi in &res.rois {
            detections.push(Detection {
                case_idx: ci,
                peak: roi.peak,
                score: score_of(roi),
            });
        }
    }
    let masks: Vec<Option<&crate::volume::MaskVolume>> =
        cases.iter().map(|c| c.lesion_mask.as_ref()).collect();
    let (ap, pr) = lesion_average_precision(&detections, &masks)?;
    let patient_scores: Vec<f64> = results
        .iter()
        .map(|r| {
            r.rois
                .iter()
                .map(|roi| score_of(roi))
                .fold(0.0, f64::max)
        })
        .collect();
    let patient_labels: Vec<u8> = cases
        .iter()
        .map(|c| {
            c.patient_label().ok_or_else(|| {
                PipelineError::InvalidInput(format!(
                    "evaluation case {} lacks a lesion mask",
                    c.case_id
                ))
            })
        })
        .collect::<Result<_>>()?;
    let roc = roc_curve(&patient_scores, &patient_labels);
    Ok((
        VariantMetrics {
            lesion_ap: ap,
            patient_auroc: auroc(&patient_scores, &patient_labels),
            n_detections: detections.len(),
        },
        pr,
        roc,
    ))
}

/// Score the test split with and without the stage-2 correction and write
/// `eval.json` plus PR/ROC curves into `cfg.report_dir`.
pub fn evaluate(cfg: &PipelineConfig, overlays: bool) -> Result<EvalSummary> {
    let s1 = load_stage1_artifacts(&cfg.model_dir)?;
    let net = load_network(&cfg.model_dir, &network_stem(&cfg.stage2.loss))?;
    let cases = load_split(&cfg.test_manifest(), cfg)?;
    let results = run_inference(&cases, &s1, &net, cfg)?;

    let (m1, pr1, roc1) = variant_metrics(&results, &cases, |r| r.p_roi)?;
    let (m2, pr2, roc2) = variant_metrics(&results, &cases, |r| r.final_prob.unwrap_or(r.p_roi))?;

    std::fs::create_dir_all(&cfg.report_dir)
        .map_err(|e| PipelineError::io(&cfg.report_dir, e))?;
    write_pr_csv(&cfg.report_dir.join("pr_stage1.csv"), &pr1)?;
    write_pr_csv(&cfg.report_dir.join("pr_stage2.csv"), &pr2)?;
    write_roc_csv(&cfg.report_dir.join("roc_stage1.csv"), &roc1)?;
    write_roc_csv(&cfg.report_dir.join("roc_stage2.csv"), &roc2)?;

    let summary = EvalSummary {
        loss: cfg.stage2.loss.clone(),
        n_cases: cases.len(),
        n_lesions: count_lesions(&cases),
        stage1: m1,
        stage2: m2,
    };
    write_json(&cfg.report_dir.join("eval.json"), &summary)?;

    if overlays {
        let dir = cfg.report_dir.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        for (case, res) in cases.iter().zip(&results) {
            crate::overlay::write_case_overlays(&dir, case, &res.rois)?;
        }
    }
    Ok(summary)
}
