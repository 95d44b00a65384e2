//! End-to-end stages behind the CLI commands: dataset generation, classifier
//! and detector training, calibration, attack runs, and the mixed-set
//! evaluation that produces the report table.

use super::config::EpsValue;
use super::report::{EvalReport, ReportRow};
use super::HarnessError;
use crate::attacks::{run_attack, AttackKind, AttackSpec, SpectrumParams};
use crate::data::{balance, generate_synthetic, load_dataset, split, Dataset, Split, SplitPlan};
use crate::detector::{
    calibrate, load_calibration, save_calibration, verdict_from_stats, CalibrationStats,
    DetectMethod, DetectorBundle, DetectorStatistics,
};
use crate::losses::{LossKind, SureParams};
use crate::models::{
    build_simple_cnn, build_unet_autoencoder, load_checkpoint, save_checkpoint, AeTrainConfig,
    AutoencoderConfig, AutoencoderModel, ClassifierModel, CnnConfig, TrainConfig, TrainHistory,
};
use crate::numerics::{RngStream, Tensor};
use crate::detector::preprocess;
use std::path::{Path, PathBuf};

/// Fraction of the train split reserved for the autoencoder; the rest is the
/// clean calibration validation set, disjoint by construction.
const AE_TRAIN_FRACTION: f32 = 0.75;

pub fn quantize_to_png(image: &Tensor, path: &Path) -> Result<(), HarnessError> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = (image.data()[i * w + j] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| HarnessError::Data(format!("cannot write {}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct GenDataParams {
    pub out: PathBuf,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GenDataSummary {
    pub files: usize,
    pub manifest: PathBuf,
}

/// Write the synthetic phantom dataset as `out/<class>/<idx>.png` plus a
/// manifest with one row per file.
pub fn run_gen_data(params: &GenDataParams) -> Result<GenDataSummary, HarnessError> {
    let dataset = generate_synthetic(params.per_class, params.size, params.seed);
    let mut manifest = String::from("path,class,split,attack\n");
    for item in &dataset.items {
        let path = params.out.join(&item.name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| HarnessError::Data(format!("cannot create {}: {e}", parent.display())))?;
        }
        quantize_to_png(&item.image, &path)?;
        manifest.push_str(&format!(
            "{},{},none,clean\n",
            item.name, dataset.class_names[item.label]
        ));
    }
    let manifest_path = params.out.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| HarnessError::Data(format!("cannot write manifest: {e}")))?;
    Ok(GenDataSummary {
        files: dataset.len(),
        manifest: manifest_path,
    })
}

fn load_prepared(data: &Path, image_size: usize, seed: u64) -> Result<(Dataset, Split), HarnessError> {
    let dataset = load_dataset(data, image_size)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    let balanced = balance(&dataset, seed);
    let plan = SplitPlan {
        seed,
        ..SplitPlan::default()
    };
    let split = split(&balanced, &plan).map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok((balanced, split))
}

#[derive(Debug, Clone)]
pub struct TrainClassifierParams {
    pub data: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub out: PathBuf,
    pub history_out: Option<PathBuf>,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainClassifierSummary {
    pub history: TrainHistory,
    pub train_items: usize,
}

pub fn run_train_classifier(
    params: &TrainClassifierParams,
) -> Result<TrainClassifierSummary, HarnessError> {
    let (dataset, split) = load_prepared(&params.data, params.image_size, params.seed)?;
    let mut model = build_simple_cnn(CnnConfig {
        input_size: params.image_size,
        classes: dataset.class_names.len(),
        seed: params.seed,
    })
    .map_err(|e| HarnessError::Data(e.to_string()))?;
    let images: Vec<Tensor> = split
        .train
        .iter()
        .map(|&i| dataset.items[i].image.clone())
        .collect();
    let labels: Vec<usize> = split.train.iter().map(|&i| dataset.items[i].label).collect();
    let history = crate::models::train_classifier(
        &mut model,
        &images,
        &labels,
        &TrainConfig {
            epochs: params.epochs,
            batch_size: params.batch_size,
            learning_rate: params.learning_rate,
            seed: params.seed,
        },
    )
    .map_err(|e| HarnessError::Data(e.to_string()))?;
    save_checkpoint(&params.out, &model.to_checkpoint())
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    if let Some(history_path) = &params.history_out {
        let mut text = String::from("epoch,loss,accuracy\n");
        for (i, e) in history.epochs.iter().enumerate() {
            text.push_str(&format!("{},{},{}\n", i + 1, e.loss, e.accuracy));
        }
        std::fs::write(history_path, text)
            .map_err(|e| HarnessError::Data(format!("cannot write history: {e}")))?;
    }
    Ok(TrainClassifierSummary {
        history,
        train_items: images.len(),
    })
}

/// Split the train indices into autoencoder-training and calibration halves,
/// deterministically from the seed.
fn detector_partition(train: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = train.to_vec();
    RngStream::seed(seed).derive("ae_holdout").shuffle(&mut order);
    let cut = ((order.len() as f32) * AE_TRAIN_FRACTION).round() as usize;
    let cut = cut.clamp(1, order.len().saturating_sub(1).max(1));
    let (ae, calib) = order.split_at(cut.min(order.len()));
    (ae.to_vec(), calib.to_vec())
}

#[derive(Debug, Clone)]
pub struct TrainDetectorParams {
    pub data: PathBuf,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub out: PathBuf,
    pub latent: usize,
    pub sure: SureParams,
    pub diffusion_lambda: f32,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainDetectorSummary {
    pub epoch_losses: Vec<f32>,
    pub ae_train_items: usize,
}

/// Train the autoencoder on clean spectra of the AE partition of the train
/// split; the checkpoint records the loss kind used.
pub fn run_train_detector(
    params: &TrainDetectorParams,
) -> Result<TrainDetectorSummary, HarnessError> {
    let (dataset, split) = load_prepared(&params.data, params.image_size, params.seed)?;
    let (ae_indices, _) = detector_partition(&split.train, params.seed);
    let spectra: Vec<Tensor> = ae_indices
        .iter()
        .map(|&i| preprocess(&dataset.items[i].image))
        .collect();
    let mut model = build_unet_autoencoder(AutoencoderConfig {
        input_size: params.image_size,
        latent: params.latent,
        seed: params.seed,
    })
    .map_err(|e| HarnessError::Data(e.to_string()))?;
    let epoch_losses = crate::models::train_autoencoder(
        &mut model,
        &spectra,
        &AeTrainConfig {
            epochs: params.epochs,
            batch_size: params.batch_size,
            learning_rate: params.learning_rate,
            seed: params.seed,
            loss: params.loss,
            sure: params.sure,
            diffusion_lambda: params.diffusion_lambda,
        },
    )
    .map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut ckpt = model.to_checkpoint();
    ckpt.arch.push_str(&format!(" loss={}", params.loss.name()));
    save_checkpoint(&params.out, &ckpt).map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok(TrainDetectorSummary {
        epoch_losses,
        ae_train_items: spectra.len(),
    })
}

/// Load a detector checkpoint and the loss kind recorded in its arch string.
pub fn load_detector(path: &Path) -> Result<(AutoencoderModel, LossKind), HarnessError> {
    let ckpt = load_checkpoint(path).map_err(|e| HarnessError::Data(e.to_string()))?;
    let loss = ckpt
        .arch
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("loss="))
        .map(|v| v.parse::<LossKind>())
        .transpose()
        .map_err(|e| HarnessError::Data(e.to_string()))?
        .unwrap_or(LossKind::Mse);
    let model =
        AutoencoderModel::from_checkpoint(&ckpt).map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok((model, loss))
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel, HarnessError> {
    let ckpt = load_checkpoint(path).map_err(|e| HarnessError::Data(e.to_string()))?;
    ClassifierModel::from_checkpoint(&ckpt).map_err(|e| HarnessError::Data(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct CalibrateParams {
    pub detector: PathBuf,
    pub data: PathBuf,
    pub quantile: f32,
    pub out: PathBuf,
    pub seed: u64,
    pub image_size: usize,
}

pub fn run_calibrate(params: &CalibrateParams) -> Result<CalibrationStats, HarnessError> {
    let (model, _) = load_detector(&params.detector)?;
    let (dataset, split) = load_prepared(&params.data, params.image_size, params.seed)?;
    let (_, calib_indices) = detector_partition(&split.train, params.seed);
    let images: Vec<Tensor> = calib_indices
        .iter()
        .map(|&i| dataset.items[i].image.clone())
        .collect();
    let stats =
        calibrate(&model, &images, params.quantile).map_err(|e| HarnessError::Data(e.to_string()))?;
    save_calibration(&params.out, &stats).map_err(|e| HarnessError::Data(e.to_string()))?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct AttackCmdParams {
    pub model: PathBuf,
    pub data: PathBuf,
    pub kind: AttackKind,
    pub eps: EpsValue,
    pub alpha: f32,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub spectrum: SpectrumParams,
    pub random_start: bool,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct AttackCmdSummary {
    pub attacked: usize,
    pub success_rate: f32,
    pub max_linf: f32,
    pub manifest: PathBuf,
}

fn attack_seed(base: u64, kind: AttackKind, eps_text: &str) -> u64 {
    RngStream::seed(base)
        .derive("attack_seed")
        .derive(kind.name())
        .derive(eps_text)
        .next_u64()
}

fn stack(images: &[Tensor]) -> Tensor {
    let per = images[0].shape().to_vec();
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&per);
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&shape, data).expect("uniform image shapes")
}

/// Attack the test items assigned to this kind by the split plan and write
/// perturbed PNGs plus a manifest with the pre-quantization norms.
pub fn run_attack_cmd(params: &AttackCmdParams) -> Result<AttackCmdSummary, HarnessError> {
    let model = load_classifier(&params.model)?;
    let (dataset, split) = load_prepared(&params.data, params.image_size, params.seed)?;
    let assigned: Vec<usize> = split
        .test
        .iter()
        .filter(|t| t.attack.as_deref() == Some(params.kind.name()))
        .map(|t| t.index)
        .collect();
    let images: Vec<Tensor> = assigned
        .iter()
        .map(|&i| dataset.items[i].image.clone())
        .collect();
    let labels: Vec<usize> = assigned.iter().map(|&i| dataset.items[i].label).collect();
    let spec = AttackSpec {
        kind: params.kind,
        epsilon: params.eps.value,
        alpha: params.alpha,
        steps: params.steps,
        random_start: params.random_start,
        spectrum: params.spectrum,
        seed: attack_seed(params.seed, params.kind, &params.eps.text),
    };
    let mut manifest = String::from("path,attack,eps,seed,linf,success\n");
    let mut max_linf = 0.0f32;
    let mut success_rate = 0.0f32;
    let mut attacked = 0usize;
    if !images.is_empty() {
        let batch = run_attack(&spec, &model, &stack(&images), &labels)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        attacked = batch.len();
        success_rate = batch.success_rate();
        let per = params.image_size * params.image_size;
        for (row, &item_index) in assigned.iter().enumerate() {
            let item = &dataset.items[item_index];
            let rel = &item.name;
            let path = params.out.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| {
                    HarnessError::Data(format!("cannot create {}: {e}", parent.display()))
                })?;
            }
            let adv = Tensor::from_vec(
                &[1, params.image_size, params.image_size],
                batch.perturbed.data()[row * per..(row + 1) * per].to_vec(),
            )
            .expect("sized");
            quantize_to_png(&adv, &path)?;
            max_linf = max_linf.max(batch.linf_norms[row]);
            manifest.push_str(&format!(
                "{rel},{},{},{},{},{}\n",
                params.kind.name(),
                params.eps.text,
                spec.seed,
                batch.linf_norms[row],
                batch.success[row]
            ));
        }
    }
    std::fs::create_dir_all(&params.out)
        .map_err(|e| HarnessError::Data(format!("cannot create {}: {e}", params.out.display())))?;
    let manifest_path = params.out.join("attack_manifest.csv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| HarnessError::Data(format!("cannot write manifest: {e}")))?;
    Ok(AttackCmdSummary {
        attacked,
        success_rate,
        max_linf,
        manifest: manifest_path,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateParams {
    pub model: PathBuf,
    pub detector: PathBuf,
    pub calib: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub eps: Vec<EpsValue>,
    pub methods: Vec<DetectMethod>,
    pub seed: u64,
    pub alpha: f32,
    pub steps: usize,
    pub image_size: usize,
}

struct MixedItem {
    label: usize,
    attack: Option<String>,
    prediction: usize,
    stats: DetectorStatistics,
}

/// Build the 37/63 mixed test set at one epsilon: clean items pass through,
/// attacked items are perturbed by their assigned kind.
fn build_mixed_set(
    model: &ClassifierModel,
    bundle: &DetectorBundle,
    dataset: &Dataset,
    split: &Split,
    eps: &EpsValue,
    base_seed: u64,
    alpha: f32,
    steps: usize,
) -> Result<Vec<MixedItem>, HarnessError> {
    let mut presented: Vec<(usize, Option<String>, Tensor)> = Vec::new();
    for t in &split.test {
        if t.attack.is_none() {
            presented.push((t.index, None, dataset.items[t.index].image.clone()));
        }
    }
    let mut kinds: Vec<String> = Vec::new();
    for t in &split.test {
        if let Some(k) = &t.attack {
            if !kinds.contains(k) {
                kinds.push(k.clone());
            }
        }
    }
    kinds.sort();
    for kind_name in &kinds {
        let kind: AttackKind = kind_name
            .parse()
            .map_err(|e: crate::attacks::AttackError| HarnessError::Data(e.to_string()))?;
        let indices: Vec<usize> = split
            .test
            .iter()
            .filter(|t| t.attack.as_deref() == Some(kind_name.as_str()))
            .map(|t| t.index)
            .collect();
        let images: Vec<Tensor> = indices
            .iter()
            .map(|&i| dataset.items[i].image.clone())
            .collect();
        let labels: Vec<usize> = indices.iter().map(|&i| dataset.items[i].label).collect();
        let spec = AttackSpec {
            kind,
            epsilon: eps.value,
            alpha,
            steps,
            random_start: false,
            spectrum: SpectrumParams::default(),
            seed: attack_seed(base_seed, kind, &eps.text),
        };
        let batch = run_attack(&spec, &model.clone(), &stack(&images), &labels)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        for (row, &norm) in batch.linf_norms.iter().enumerate() {
            if norm > eps.value + 1e-6 {
                return Err(HarnessError::Data(format!(
                    "attack {kind_name} exceeded budget: {norm} > {}",
                    eps.value
                )));
            }
            let per = images[0].numel();
            let adv = Tensor::from_vec(
                images[0].shape(),
                batch.perturbed.data()[row * per..(row + 1) * per].to_vec(),
            )
            .expect("sized");
            presented.push((indices[row], Some(kind_name.clone()), adv));
        }
    }

    let tensors: Vec<Tensor> = presented.iter().map(|(_, _, t)| t.clone()).collect();
    let predictions = model
        .predict(&stack(&tensors))
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(presented.len());
    for ((index, attack, tensor), prediction) in presented.into_iter().zip(predictions) {
        let stats = crate::detector::statistics(bundle, &tensor)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        out.push(MixedItem {
            label: dataset.items[index].label,
            attack,
            prediction,
            stats,
        });
    }
    Ok(out)
}

fn accuracy<'a>(items: impl Iterator<Item = &'a MixedItem>) -> f32 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for item in items {
        total += 1;
        if item.prediction == item.label {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f32 / total as f32
    }
}

/// Detection accuracy = true flags + true passes over the subset; guarded
/// accuracy counts a rejected attacked item as correct, a rejected clean item
/// as wrong, and a passed item by its classification.
fn detection_and_guarded(
    items: &[&MixedItem],
    calib: &CalibrationStats,
    method: DetectMethod,
) -> (f32, f32) {
    let mut detect_correct = 0usize;
    let mut guarded_correct = 0usize;
    for item in items {
        let verdict = verdict_from_stats(item.stats, calib, method);
        let attacked = item.attack.is_some();
        if verdict.tampered == attacked {
            detect_correct += 1;
        }
        let ok = if verdict.tampered {
            attacked
        } else {
            item.prediction == item.label
        };
        if ok {
            guarded_correct += 1;
        }
    }
    let n = items.len().max(1) as f32;
    (detect_correct as f32 / n, guarded_correct as f32 / n)
}

pub fn run_evaluate(params: &EvaluateParams) -> Result<EvalReport, HarnessError> {
    for (path, what) in [
        (&params.model, "classifier checkpoint"),
        (&params.detector, "detector checkpoint"),
        (&params.calib, "calibration file"),
        (&params.data, "dataset directory"),
    ] {
        if !path.exists() {
            return Err(HarnessError::Data(format!(
                "missing {what}: {}",
                path.display()
            )));
        }
    }
    let model = load_classifier(&params.model)?;
    let (ae, loss_kind) = load_detector(&params.detector)?;
    let calib = load_calibration(&params.calib).map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut bundle = DetectorBundle::new(ae, loss_kind);
    bundle.stats = Some(calib.clone());
    let (dataset, split) = load_prepared(&params.data, params.image_size, params.seed)?;

    let mut pooled_rows = Vec::new();
    let mut breakdown_rows = Vec::new();
    for eps in &params.eps {
        let mixed = build_mixed_set(
            &model,
            &bundle,
            &dataset,
            &split,
            eps,
            params.seed,
            params.alpha,
            params.steps,
        )?;
        let clean_acc = accuracy(mixed.iter().filter(|m| m.attack.is_none()));
        let attacked_acc = accuracy(mixed.iter().filter(|m| m.attack.is_some()));
        let mut kinds: Vec<String> = Vec::new();
        for m in &mixed {
            if let Some(k) = &m.attack {
                if !kinds.contains(k) {
                    kinds.push(k.clone());
                }
            }
        }
        kinds.sort();
        for &method in &params.methods {
            let all: Vec<&MixedItem> = mixed.iter().collect();
            let (detect_acc, guarded_acc) = detection_and_guarded(&all, &calib, method);
            pooled_rows.push(ReportRow {
                model: "simple_cnn".to_string(),
                loss: loss_kind.name().to_string(),
                method: method.name().to_string(),
                eps: eps.text.clone(),
                clean_acc,
                attacked_acc,
                detect_acc,
                guarded_acc,
                attack_kind: "all".to_string(),
            });
            for kind in &kinds {
                let subset: Vec<&MixedItem> = mixed
                    .iter()
                    .filter(|m| m.attack.is_none() || m.attack.as_deref() == Some(kind.as_str()))
                    .collect();
                let (d, g) = detection_and_guarded(&subset, &calib, method);
                let kind_acc =
                    accuracy(mixed.iter().filter(|m| m.attack.as_deref() == Some(kind.as_str())));
                breakdown_rows.push(ReportRow {
                    model: "simple_cnn".to_string(),
                    loss: loss_kind.name().to_string(),
                    method: method.name().to_string(),
                    eps: eps.text.clone(),
                    clean_acc,
                    attacked_acc: kind_acc,
                    detect_acc: d,
                    guarded_acc: g,
                    attack_kind: kind.clone(),
                });
            }
        }
    }
    let mut rows = pooled_rows;
    rows.extend(breakdown_rows);
    let report = EvalReport { rows };
    std::fs::write(&params.out, report.to_csv())
        .map_err(|e| HarnessError::Data(format!("cannot write report: {e}")))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ReportParams {
    pub input: PathBuf,
    pub format: String,
}

pub fn run_report(params: &ReportParams) -> Result<String, HarnessError> {
    if params.format != "md" {
        return Err(HarnessError::Usage(format!(
            "unknown report format '{}'; expected md",
            params.format
        )));
    }
    let text = std::fs::read_to_string(&params.input)
        .map_err(|e| HarnessError::Data(format!("cannot read {}: {e}", params.input.display())))?;
    let report = EvalReport::from_csv(&text)?;
    Ok(report.to_markdown())
}
