//! The frequency-domain defense gate: DFT log-magnitude preprocessing, an
//! autoencoder trained on clean spectra, and three detection statistics
//! (reconstruction error, latent distance, decoded distance) with thresholds
//! calibrated on a clean validation set.

use crate::losses::LossKind;
use crate::models::{AutoencoderModel, ModelError};
use crate::numerics::{NumericsError, Tensor};
use crate::transforms::log_magnitude_feature;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("detector bundle is not calibrated; run calibrate first")]
    Uncalibrated,
    #[error("calibration requires a nonempty clean validation set")]
    EmptyValidationSet,
    #[error("quantile {0} outside (0, 1]")]
    BadQuantile(f32),
    #[error("unknown detection method '{0}'; expected loss, encoded, decoded, any, or majority")]
    UnknownMethod(String),
    #[error("malformed calibration file: {0}")]
    BadCalibrationFile(String),
    #[error("calibration io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Thresholds and clean-data centroids produced by [`calibrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub quantile: f32,
    /// Reconstruction-error threshold (the Loss method).
    pub t_re: f32,
    /// Latent-distance threshold (the Encoded method).
    pub t_enc: f32,
    /// Decoded-distance threshold (the Decoded method).
    pub t_dec: f32,
    /// Latent-space mean of the clean calibration set.
    pub mu_enc: Vec<f32>,
    /// Decoded-space mean of the clean calibration set.
    pub mu_dec: Vec<f32>,
    pub calib_count: usize,
    /// Hex SHA-256 over the calibration images' little-endian f32 bytes.
    pub calib_hash: String,
}

/// The three per-image statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorStatistics {
    pub recon_error: f32,
    pub latent_dist: f32,
    pub decoded_dist: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectMethod {
    Loss,
    Encoded,
    Decoded,
    Any,
    Majority,
}

impl DetectMethod {
    pub fn name(self) -> &'static str {
        match self {
            DetectMethod::Loss => "loss",
            DetectMethod::Encoded => "encoded",
            DetectMethod::Decoded => "decoded",
            DetectMethod::Any => "any",
            DetectMethod::Majority => "majority",
        }
    }

    /// The three single-statistic methods reported in the evaluation table.
    pub const BASE: [DetectMethod; 3] = [
        DetectMethod::Loss,
        DetectMethod::Encoded,
        DetectMethod::Decoded,
    ];
}

impl fmt::Display for DetectMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectMethod {
    type Err = DetectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loss" => Ok(DetectMethod::Loss),
            "encoded" => Ok(DetectMethod::Encoded),
            "decoded" => Ok(DetectMethod::Decoded),
            "any" => Ok(DetectMethod::Any),
            "majority" => Ok(DetectMethod::Majority),
            other => Err(DetectorError::UnknownMethod(other.to_string())),
        }
    }
}

/// Per-method flags for one image. A statistic sitting exactly on its
/// threshold does not flag (strict inequality).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionVerdict {
    pub stats: DetectorStatistics,
    pub loss_flag: bool,
    pub encoded_flag: bool,
    pub decoded_flag: bool,
    pub method: DetectMethod,
    pub tampered: bool,
}

/// Autoencoder, the loss it was trained with, and (once calibrated) the
/// thresholds used at inference.
#[derive(Debug, Clone)]
pub struct DetectorBundle {
    pub model: AutoencoderModel,
    pub loss_kind: LossKind,
    pub stats: Option<CalibrationStats>,
}

impl DetectorBundle {
    pub fn new(model: AutoencoderModel, loss_kind: LossKind) -> Self {
        Self {
            model,
            loss_kind,
            stats: None,
        }
    }

    pub fn calibration(&self) -> Result<&CalibrationStats, DetectorError> {
        self.stats.as_ref().ok_or(DetectorError::Uncalibrated)
    }
}

/// DFT log-magnitude feature of a `[1, H, W]` image, as the `[1, H, W]`
/// autoencoder input.
pub fn preprocess(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let feature = log_magnitude_feature(h, w, image.data());
    Tensor::from_vec(&[1, h, w], feature).expect("feature sized to grid")
}

fn batch_of_one(feature: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(feature.shape());
    Tensor::from_vec(&shape, feature.data().to_vec()).expect("sized")
}

fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum::<f64>()
        .sqrt() as f32
}

/// Encode/decode one image and compute all three statistics against the
/// calibrated centroids.
pub fn statistics(
    bundle: &DetectorBundle,
    image: &Tensor,
) -> Result<DetectorStatistics, DetectorError> {
    let calib = bundle.calibration()?;
    let (feature, z, decoded) = encode_decode(&bundle.model, image)?;
    Ok(DetectorStatistics {
        recon_error: mean_sq_diff(feature.data(), decoded.data()),
        latent_dist: euclidean(z.data(), &calib.mu_enc),
        decoded_dist: euclidean(decoded.data(), &calib.mu_dec),
    })
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f32 {
    let acc: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(x - y);
            d * d
        })
        .sum();
    (acc / a.len() as f64) as f32
}

fn encode_decode(
    model: &AutoencoderModel,
    image: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), DetectorError> {
    let feature = preprocess(image);
    let batched = batch_of_one(&feature);
    let z = model.encode(&batched)?;
    let decoded = model.decode(&z)?;
    Ok((feature, z, decoded))
}

/// Nearest-rank quantile: element at 1-based index ceil(q * n) of the
/// ascending sort.
pub fn nearest_rank_quantile(values: &[f32], q: f32) -> f32 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let rank = (f64::from(q) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Compute centroids and nearest-rank thresholds over a clean validation
/// set, which must be disjoint from the autoencoder's training set.
pub fn calibrate(
    model: &AutoencoderModel,
    clean_validation: &[Tensor],
    quantile: f32,
) -> Result<CalibrationStats, DetectorError> {
    if clean_validation.is_empty() {
        return Err(DetectorError::EmptyValidationSet);
    }
    if !(0.0..=1.0).contains(&quantile) || quantile == 0.0 {
        return Err(DetectorError::BadQuantile(quantile));
    }
    let mut hasher = Sha256::new();
    let mut features = Vec::with_capacity(clean_validation.len());
    let mut latents = Vec::with_capacity(clean_validation.len());
    let mut decodeds = Vec::with_capacity(clean_validation.len());
    for image in clean_validation {
        for v in image.data() {
            hasher.update(v.to_le_bytes());
        }
        let (feature, z, decoded) = encode_decode(model, image)?;
        features.push(feature);
        latents.push(z);
        decodeds.push(decoded);
    }
    let mu_enc = mean_vector(&latents);
    let mu_dec = mean_vector(&decodeds);

    let recon: Vec<f32> = features
        .iter()
        .zip(&decodeds)
        .map(|(f, d)| mean_sq_diff(f.data(), d.data()))
        .collect();
    let enc_dist: Vec<f32> = latents.iter().map(|z| euclidean(z.data(), &mu_enc)).collect();
    let dec_dist: Vec<f32> = decodeds
        .iter()
        .map(|d| euclidean(d.data(), &mu_dec))
        .collect();

    let digest = hasher.finalize();
    let calib_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(CalibrationStats {
        quantile,
        t_re: nearest_rank_quantile(&recon, quantile),
        t_enc: nearest_rank_quantile(&enc_dist, quantile),
        t_dec: nearest_rank_quantile(&dec_dist, quantile),
        mu_enc,
        mu_dec,
        calib_count: clean_validation.len(),
        calib_hash,
    })
}

fn mean_vector(tensors: &[Tensor]) -> Vec<f32> {
    let dim = tensors[0].numel();
    let mut acc = vec![0.0f64; dim];
    for t in tensors {
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += f64::from(v);
        }
    }
    let n = tensors.len() as f64;
    acc.iter().map(|a| (a / n) as f32).collect()
}

/// Flag an image under a detection method; statistics strictly above their
/// thresholds flag.
pub fn detect(
    bundle: &DetectorBundle,
    image: &Tensor,
    method: DetectMethod,
) -> Result<DetectionVerdict, DetectorError> {
    let calib = bundle.calibration()?;
    let stats = statistics(bundle, image)?;
    Ok(verdict_from_stats(stats, calib, method))
}

/// Pure threshold logic, reusable once statistics are in hand.
pub fn verdict_from_stats(
    stats: DetectorStatistics,
    calib: &CalibrationStats,
    method: DetectMethod,
) -> DetectionVerdict {
    let loss_flag = stats.recon_error > calib.t_re;
    let encoded_flag = stats.latent_dist > calib.t_enc;
    let decoded_flag = stats.decoded_dist > calib.t_dec;
    let tampered = match method {
        DetectMethod::Loss => loss_flag,
        DetectMethod::Encoded => encoded_flag,
        DetectMethod::Decoded => decoded_flag,
        DetectMethod::Any => loss_flag || encoded_flag || decoded_flag,
        DetectMethod::Majority => {
            [loss_flag, encoded_flag, decoded_flag]
                .iter()
                .filter(|&&f| f)
                .count()
                >= 2
        }
    };
    DetectionVerdict {
        stats,
        loss_flag,
        encoded_flag,
        decoded_flag,
        method,
        tampered,
    }
}

/// Outcome of the gated pipeline for one image.
#[derive(Debug, Clone, PartialEq)]
pub enum GuardedOutcome {
    Rejected(DetectionVerdict),
    Classified(usize),
}

/// Reject flagged images without invoking the classifier; pass clean-looking
/// images straight through.
pub fn guarded_classify<F>(
    bundle: &DetectorBundle,
    image: &Tensor,
    method: DetectMethod,
    classify: F,
) -> Result<GuardedOutcome, DetectorError>
where
    F: FnOnce(&Tensor) -> usize,
{
    let verdict = detect(bundle, image, method)?;
    if verdict.tampered {
        Ok(GuardedOutcome::Rejected(verdict))
    } else {
        Ok(GuardedOutcome::Classified(classify(image)))
    }
}

/// Serialize calibration stats as UTF-8 key/value lines.
pub fn save_calibration(path: &Path, stats: &CalibrationStats) -> Result<(), DetectorError> {
    let mut text = String::new();
    text.push_str(&format!("q={}\n", stats.quantile));
    text.push_str(&format!("t_re={}\n", stats.t_re));
    text.push_str(&format!("t_enc={}\n", stats.t_enc));
    text.push_str(&format!("t_dec={}\n", stats.t_dec));
    text.push_str(&format!("centroid_enc={}\n", join_floats(&stats.mu_enc)));
    text.push_str(&format!("centroid_dec={}\n", join_floats(&stats.mu_dec)));
    text.push_str(&format!("calib_count={}\n", stats.calib_count));
    text.push_str(&format!("calib_hash={}\n", stats.calib_hash));
    std::fs::write(path, text)?;
    Ok(())
}

fn join_floats(values: &[f32]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn load_calibration(path: &Path) -> Result<CalibrationStats, DetectorError> {
    let text = std::fs::read_to_string(path)?;
    let mut q = None;
    let mut t_re = None;
    let mut t_enc = None;
    let mut t_dec = None;
    let mut mu_enc = None;
    let mut mu_dec = None;
    let mut calib_count = None;
    let mut calib_hash = None;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DetectorError::BadCalibrationFile(format!("bad line: {line}")))?;
        let parse_f32 = |v: &str| {
            v.parse::<f32>()
                .map_err(|_| DetectorError::BadCalibrationFile(format!("bad float in {key}")))
        };
        match key {
            "q" => q = Some(parse_f32(value)?),
            "t_re" => t_re = Some(parse_f32(value)?),
            "t_enc" => t_enc = Some(parse_f32(value)?),
            "t_dec" => t_dec = Some(parse_f32(value)?),
            "centroid_enc" => mu_enc = Some(parse_floats(value)?),
            "centroid_dec" => mu_dec = Some(parse_floats(value)?),
            "calib_count" => {
                calib_count = Some(value.parse::<usize>().map_err(|_| {
                    DetectorError::BadCalibrationFile("bad calib_count".to_string())
                })?)
            }
            "calib_hash" => calib_hash = Some(value.to_string()),
            other => {
                return Err(DetectorError::BadCalibrationFile(format!(
                    "unknown key {other}"
                )))
            }
        }
    }
    let missing = |name: &str| DetectorError::BadCalibrationFile(format!("missing {name}"));
    Ok(CalibrationStats {
        quantile: q.ok_or_else(|| missing("q"))?,
        t_re: t_re.ok_or_else(|| missing("t_re"))?,
        t_enc: t_enc.ok_or_else(|| missing("t_enc"))?,
        t_dec: t_dec.ok_or_else(|| missing("t_dec"))?,
        mu_enc: mu_enc.ok_or_else(|| missing("centroid_enc"))?,
        mu_dec: mu_dec.ok_or_else(|| missing("centroid_dec"))?,
        calib_count: calib_count.ok_or_else(|| missing("calib_count"))?,
        calib_hash: calib_hash.ok_or_else(|| missing("calib_hash"))?,
    })
}

fn parse_floats(value: &str) -> Result<Vec<f32>, DetectorError> {
    value
        .split(',')
        .map(|v| {
            v.parse::<f32>()
                .map_err(|_| DetectorError::BadCalibrationFile("bad centroid entry".to_string()))
        })
        .collect()
}
