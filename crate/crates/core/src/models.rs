//! The two trainable networks: a small CNN classifier and a U-Net-style
//! convolutional autoencoder (skip connections omitted so the identity stays
//! unlearnable and reconstruction error keeps its anomaly signal), plus a
//! binary checkpoint format shared by both.

use crate::losses::{self, LossKind, SureParams, DIFFUSION_LAMBDA_DEFAULT};
use crate::numerics::{
    optimizer_step, LayerSpec, NumericsError, OptimizerState, Reduction, RngStream, Sequential,
    Tape, Tensor,
};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FQSD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input size {0} must be divisible by {1}")]
    BadInputSize(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("checkpoint payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint architecture '{got}' does not match expected '{expected}'")]
    ArchMismatch { expected: String, got: String },
}

/// Classifier over `[B, 1, s, s]` images in [0,1], producing class logits.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub net: Sequential,
    pub input_size: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CnnConfig {
    pub input_size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            classes: 4,
            seed: 0,
        }
    }
}

/// Three conv/pool stages (16, 32, 64 channels) into a 128-wide dense head.
pub fn build_simple_cnn(config: CnnConfig) -> Result<ClassifierModel, ModelError> {
    if config.input_size % 8 != 0 || config.input_size == 0 {
        return Err(ModelError::BadInputSize(config.input_size, 8));
    }
    let s = config.input_size;
    let layers = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Conv2d {
            in_channels: 16,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Conv2d {
            in_channels: 32,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 64 * (s / 8) * (s / 8),
            outputs: 128,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 128,
            outputs: config.classes,
        },
    ];
    let mut stream = RngStream::seed(config.seed).derive("simple_cnn_init");
    let net = Sequential::new(layers, &[1, s, s], &mut stream)?;
    Ok(ClassifierModel {
        net,
        input_size: s,
        classes: config.classes,
    })
}

impl ClassifierModel {
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.net.forward_value(images)?)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(images)?;
        Ok(argmax_rows(&logits, self.classes))
    }

    pub fn arch_string(&self) -> String {
        format!(
            "simple_cnn input_size={} classes={}",
            self.input_size, self.classes
        )
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        CheckpointData {
            arch: self.arch_string(),
            tensors: self
                .net
                .param_names()
                .iter()
                .cloned()
                .zip(self.net.params().iter().cloned())
                .collect(),
        }
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self, ModelError> {
        let fields = parse_arch(&data.arch, "simple_cnn")?;
        let config = CnnConfig {
            input_size: fields.get_usize("input_size")?,
            classes: fields.get_usize("classes")?,
            seed: 0,
        };
        let mut model = build_simple_cnn(config)?;
        assign_params(&mut model.net, data)?;
        Ok(model)
    }
}

fn argmax_rows(logits: &Tensor, classes: usize) -> Vec<usize> {
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Convolutional autoencoder over `[B, 1, s, s]` feature maps in [0,1] with a
/// dense bottleneck of dimension `latent`.
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub input_size: usize,
    pub latent: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AutoencoderConfig {
    pub input_size: usize,
    pub latent: usize,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            latent: 64,
            seed: 0,
        }
    }
}

pub fn build_unet_autoencoder(config: AutoencoderConfig) -> Result<AutoencoderModel, ModelError> {
    if config.input_size % 4 != 0 || config.input_size == 0 {
        return Err(ModelError::BadInputSize(config.input_size, 4));
    }
    let s = config.input_size;
    let q = s / 4;
    let flat = 32 * q * q;
    let encoder_layers = vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Conv2d {
            in_channels: 16,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: flat,
            outputs: config.latent,
        },
    ];
    let decoder_layers = vec![
        LayerSpec::Dense {
            inputs: config.latent,
            outputs: flat,
        },
        LayerSpec::Relu,
        LayerSpec::Reshape {
            shape: vec![32, q, q],
        },
        LayerSpec::ConvTranspose2d {
            in_channels: 32,
            out_channels: 32,
            kernel: 2,
            stride: 2,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::ConvTranspose2d {
            in_channels: 32,
            out_channels: 16,
            kernel: 2,
            stride: 2,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 16,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Sigmoid,
    ];
    let mut stream = RngStream::seed(config.seed).derive("unet_ae_init");
    let encoder = Sequential::new(encoder_layers, &[1, s, s], &mut stream)?;
    let decoder = Sequential::new(decoder_layers, &[config.latent], &mut stream)?;
    Ok(AutoencoderModel {
        encoder,
        decoder,
        input_size: s,
        latent: config.latent,
    })
}

impl AutoencoderModel {
    pub fn encode(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.encoder.forward_value(features)?)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.decoder.forward_value(latent)?)
    }

    pub fn reconstruct(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        self.decode(&self.encode(features)?)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn arch_string(&self) -> String {
        format!(
            "unet_ae input_size={} latent={}",
            self.input_size, self.latent
        )
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, p) in self
            .encoder
            .param_names()
            .iter()
            .zip(self.encoder.params())
        {
            tensors.push((format!("encoder.{name}"), p.clone()));
        }
        for (name, p) in self
            .decoder
            .param_names()
            .iter()
            .zip(self.decoder.params())
        {
            tensors.push((format!("decoder.{name}"), p.clone()));
        }
        CheckpointData {
            arch: self.arch_string(),
            tensors,
        }
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self, ModelError> {
        let fields = parse_arch(&data.arch, "unet_ae")?;
        let config = AutoencoderConfig {
            input_size: fields.get_usize("input_size")?,
            latent: fields.get_usize("latent")?,
            seed: 0,
        };
        let mut model = build_unet_autoencoder(config)?;
        let enc_count = model.encoder.params().len();
        let expected = enc_count + model.decoder.params().len();
        if data.tensors.len() != expected {
            return Err(ModelError::BadHeader(format!(
                "expected {expected} tensors, found {}",
                data.tensors.len()
            )));
        }
        for (i, (name, tensor)) in data.tensors.iter().enumerate() {
            let (net, idx, prefix) = if i < enc_count {
                (&mut model.encoder, i, "encoder")
            } else {
                (&mut model.decoder, i - enc_count, "decoder")
            };
            let expected_name = format!("{prefix}.{}", net.param_names()[idx]);
            if *name != expected_name || tensor.shape() != net.params()[idx].shape() {
                return Err(ModelError::BadHeader(format!(
                    "tensor {i} mismatch: {name} vs {expected_name}"
                )));
            }
            net.params_mut()[idx] = tensor.clone();
        }
        Ok(model)
    }
}

struct ArchFields(Vec<(String, String)>);

impl ArchFields {
    fn get_usize(&self, key: &str) -> Result<usize, ModelError> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| ModelError::BadHeader(format!("missing arch field {key}")))?
            .1
            .parse()
            .map_err(|_| ModelError::BadHeader(format!("bad arch field {key}")))
    }
}

fn parse_arch(arch: &str, expected_kind: &str) -> Result<ArchFields, ModelError> {
    let mut parts = arch.split_whitespace();
    let kind = parts.next().unwrap_or_default();
    if kind != expected_kind {
        return Err(ModelError::ArchMismatch {
            expected: expected_kind.to_string(),
            got: kind.to_string(),
        });
    }
    let fields = parts
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| ModelError::BadHeader(format!("bad arch token {p}")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(ArchFields(fields))
}

/// Architecture descriptor plus named weight tensors, in serialization order.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub arch: String,
    pub tensors: Vec<(String, Tensor)>,
}

/// Layout: magic "FQSD", u32 LE version, u64 LE header length, UTF-8 header,
/// then all weights as little-endian f32 in header order.
pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<(), ModelError> {
    let mut header = String::new();
    header.push_str(&format!("arch {}\n", data.arch));
    header.push_str("dtype f32\n");
    for (name, tensor) in &data.tensors {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() {
            "scalar".to_string()
        } else {
            dims.join("x")
        };
        header.push_str(&format!("tensor {name} {dims}\n"));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header.len() as u64).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for (_, tensor) in &data.tensors {
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, ModelError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let mut long = [0u8; 8];
    file.read_exact(&mut long)?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| {
        ModelError::BadHeader("header shorter than declared length".to_string())
    })?;
    let header = String::from_utf8(header_bytes)
        .map_err(|_| ModelError::BadHeader("header is not utf-8".to_string()))?;

    let mut arch = None;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("arch ") {
            arch = Some(rest.to_string());
        } else if line == "dtype f32" || line.is_empty() {
            continue;
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let (name, dims) = rest
                .rsplit_once(' ')
                .ok_or_else(|| ModelError::BadHeader(format!("bad tensor line: {line}")))?;
            let shape: Vec<usize> = if dims == "scalar" {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| {
                        d.parse()
                            .map_err(|_| ModelError::BadHeader(format!("bad dims: {dims}")))
                    })
                    .collect::<Result<_, _>>()?
            };
            specs.push((name.to_string(), shape));
        } else {
            return Err(ModelError::BadHeader(format!("unknown header line: {line}")));
        }
    }
    let arch = arch.ok_or_else(|| ModelError::BadHeader("missing arch line".to_string()))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let expected: usize = specs
        .iter()
        .map(|(_, s)| s.iter().product::<usize>().max(1) * 4)
        .sum();
    if payload.len() != expected {
        return Err(ModelError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for (name, shape) in specs {
        let count: usize = shape.iter().product::<usize>().max(1);
        let data: Vec<f32> = payload[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += count * 4;
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(CheckpointData { arch, tensors })
}

fn assign_params(net: &mut Sequential, data: &CheckpointData) -> Result<(), ModelError> {
    if data.tensors.len() != net.params().len() {
        return Err(ModelError::BadHeader(format!(
            "expected {} tensors, found {}",
            net.params().len(),
            data.tensors.len()
        )));
    }
    for (i, (name, tensor)) in data.tensors.iter().enumerate() {
        if *name != net.param_names()[i] || tensor.shape() != net.params()[i].shape() {
            return Err(ModelError::BadHeader(format!(
                "tensor {i} mismatch: {name}"
            )));
        }
        net.params_mut()[i] = tensor.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f32,
    pub accuracy: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

fn stack_images(images: &[&Tensor]) -> Result<Tensor, NumericsError> {
    let per = images[0].shape().to_vec();
    let mut shape = vec![images.len()];
    shape.extend_from_slice(&per);
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Adam training loop over (image, label) pairs with per-epoch mean loss and
/// training accuracy.
pub fn train_classifier(
    model: &mut ClassifierModel,
    images: &[Tensor],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(ModelError::EmptyDataset);
    }
    let mut optimizer = OptimizerState::adam(config.learning_rate);
    let mut history = TrainHistory::default();
    let order_stream = RngStream::seed(config.seed).derive("classifier_epochs");
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order_stream.derive_index(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch_imgs: Vec<&Tensor> = chunk.iter().map(|&i| &images[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = stack_images(&batch_imgs)?;

            let mut tape = Tape::new();
            let x_id = tape.leaf(&x);
            let params = model.net.register_params(&mut tape, true);
            let logits = model.net.forward_with(&mut tape, &params, x_id)?;
            let loss = tape.cross_entropy(logits, &batch_labels, Reduction::Mean)?;
            tape.backward(loss)?;

            loss_sum += f64::from(tape.value(loss)[0]);
            batches += 1;
            let preds = argmax_rows(&tape.to_tensor(logits), model.classes);
            correct += preds
                .iter()
                .zip(&batch_labels)
                .filter(|(p, y)| p == y)
                .count();

            let grads: Vec<Option<&[f32]>> = params.iter().map(|&id| tape.grad(id)).collect();
            optimizer_step(&mut optimizer, model.net.params_mut(), &grads)?;
        }
        history.epochs.push(EpochStats {
            loss: (loss_sum / batches.max(1) as f64) as f32,
            accuracy: correct as f32 / images.len() as f32,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub loss: LossKind,
    pub sure: SureParams,
    pub diffusion_lambda: f32,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossKind::Mse,
            sure: SureParams::default(),
            diffusion_lambda: DIFFUSION_LAMBDA_DEFAULT,
        }
    }
}

/// Train the autoencoder on clean spectra only; returns per-epoch mean loss.
pub fn train_autoencoder(
    model: &mut AutoencoderModel,
    spectra: &[Tensor],
    config: &AeTrainConfig,
) -> Result<Vec<f32>, ModelError> {
    if spectra.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut enc_opt = OptimizerState::adam(config.learning_rate);
    let mut dec_opt = OptimizerState::adam(config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let root = RngStream::seed(config.seed);
    let order_stream = root.derive("autoencoder_epochs");
    let probe_root = root.derive("sure_probes");
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..spectra.len()).collect();
        order_stream.derive_index(epoch as u64).shuffle(&mut order);
        let mut probe_stream = probe_root.derive_index(epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &spectra[i]).collect();
            let x = stack_images(&batch)?;

            let mut tape = Tape::new();
            let x_id = tape.leaf(&x);
            let enc_params = model.encoder.register_params(&mut tape, true);
            let dec_params = model.decoder.register_params(&mut tape, true);
            let encoder = &model.encoder;
            let decoder = &model.decoder;
            let loss = losses::composite_recon_loss(
                &mut tape,
                config.loss,
                |t, v| {
                    let z = encoder.forward_with(t, &enc_params, v)?;
                    decoder.forward_with(t, &dec_params, z)
                },
                x_id,
                &config.sure,
                config.diffusion_lambda,
                &mut probe_stream,
            )?;
            tape.backward(loss)?;
            loss_sum += f64::from(tape.value(loss)[0]);
            batches += 1;

            let all_ids: Vec<_> = enc_params.iter().chain(&dec_params).copied().collect();
            let grads: Vec<Option<&[f32]>> = all_ids.iter().map(|&id| tape.grad(id)).collect();
            let enc_len = model.encoder.params().len();
            let (enc_grads, dec_grads) = grads.split_at(enc_len);
            optimizer_step(&mut enc_opt, model.encoder.params_mut(), enc_grads)?;
            optimizer_step(&mut dec_opt, model.decoder.params_mut(), dec_grads)?;
        }
        epoch_losses.push((loss_sum / batches.max(1) as f64) as f32);
    }
    Ok(epoch_losses)
}

/// Mean reconstruction MSE over a set of spectra, batched for speed.
pub fn mean_reconstruction_mse(
    model: &AutoencoderModel,
    spectra: &[Tensor],
) -> Result<f32, ModelError> {
    if spectra.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut total = 0.0f64;
    for chunk in spectra.chunks(64) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let x = stack_images(&refs)?;
        let out = model.reconstruct(&x)?;
        let per: f64 = x
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| f64::from(a - b) * f64::from(a - b))
            .sum();
        total += per;
    }
    let numel: usize = spectra.iter().map(Tensor::numel).sum();
    Ok((total / numel as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn cnn_shape_contract_and_param_count() {
        let model = build_simple_cnn(CnnConfig::default()).unwrap();
        let x = Tensor::zeros(&[2, 1, 64, 64]);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);

        // Closed-form tally: conv(cin,cout,k) = cout*cin*k^2 + cout,
        // dense(i,o) = i*o + o.
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let dense = |i: usize, o: usize| i * o + o;
        let expected = conv(1, 16)
            + conv(16, 32)
            + conv(32, 64)
            + dense(64 * 8 * 8, 128)
            + dense(128, 4);
        assert_eq!(model.net.param_count(), expected);
    }

    #[test]
    fn cnn_rejects_bad_input_size() {
        let err = build_simple_cnn(CnnConfig {
            input_size: 60,
            ..CnnConfig::default()
        })
        .unwrap_err();
        assert!(matches!(err, ModelError::BadInputSize(60, 8)));
    }

    #[test]
    fn cnn_same_seed_same_weights() {
        let a = build_simple_cnn(CnnConfig::default()).unwrap();
        let b = build_simple_cnn(CnnConfig::default()).unwrap();
        assert_eq!(a.net.params(), b.net.params());
    }

    #[test]
    fn softmax_of_logits_normalizes() {
        let model = build_simple_cnn(CnnConfig::default()).unwrap();
        let mut stream = RngStream::seed(4);
        let data: Vec<f32> = (0..64 * 64).map(|_| stream.uniform(0.0, 1.0)).collect();
        let x = Tensor::from_vec(&[1, 1, 64, 64], data).unwrap();
        let logits = model.logits(&x).unwrap();
        assert!(logits.all_finite());
        let row = logits.data();
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|v| (v - m).exp()).sum();
        let norm: f32 = row.iter().map(|v| (v - m).exp() / sum).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn autoencoder_shape_and_range() {
        let model = build_unet_autoencoder(AutoencoderConfig::default()).unwrap();
        assert!(model.latent < 64 * 64);
        let mut stream = RngStream::seed(5);
        let data: Vec<f32> = (0..2 * 64 * 64).map(|_| stream.uniform(0.0, 1.0)).collect();
        let x = Tensor::from_vec(&[2, 1, 64, 64], data).unwrap();
        let out = model.reconstruct(&x).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let z = model.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 64]);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let model = build_simple_cnn(CnnConfig {
            input_size: 16,
            classes: 3,
            seed: 9,
        })
        .unwrap();
        let p1 = dir.path().join("a.fqsd");
        let p2 = dir.path().join("b.fqsd");
        save_checkpoint(&p1, &model.to_checkpoint()).unwrap();
        let loaded = ClassifierModel::from_checkpoint(&load_checkpoint(&p1).unwrap()).unwrap();
        assert_eq!(loaded.net.params(), model.net.params());
        save_checkpoint(&p2, &loaded.to_checkpoint()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.fqsd");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::BadMagic)));

        let model = build_simple_cnn(CnnConfig {
            input_size: 8,
            classes: 2,
            seed: 1,
        })
        .unwrap();
        let good = dir.path().join("good.fqsd");
        save_checkpoint(&good, &model.to_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 7);
        let cut = dir.path().join("cut.fqsd");
        std::fs::write(&cut, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(ModelError::Truncated { .. })
        ));
    }

    #[test]
    fn checkpoint_header_sizes_sum_to_payload() {
        let dir = tempdir().unwrap();
        let model = build_unet_autoencoder(AutoencoderConfig {
            input_size: 16,
            latent: 8,
            seed: 2,
        })
        .unwrap();
        let path = dir.path().join("ae.fqsd");
        save_checkpoint(&path, &model.to_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let declared: usize = header
            .lines()
            .filter_map(|l| l.strip_prefix("tensor "))
            .map(|rest| {
                let dims = rest.rsplit_once(' ').unwrap().1;
                dims.split('x').map(|d| d.parse::<usize>().unwrap()).product::<usize>()
            })
            .sum();
        assert_eq!(bytes.len() - 16 - header_len, declared * 4);
    }

    #[test]
    fn zero_epochs_leaves_weights_untouched() {
        let mut model = build_simple_cnn(CnnConfig {
            input_size: 8,
            classes: 2,
            seed: 3,
        })
        .unwrap();
        let before = model.net.params().to_vec();
        let images = vec![Tensor::zeros(&[1, 8, 8]); 4];
        let labels = vec![0, 1, 0, 1];
        let hist = train_classifier(
            &mut model,
            &images,
            &labels,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(hist.epochs.is_empty());
        assert_eq!(model.net.params(), &before[..]);
    }

    #[test]
    fn zero_lr_training_has_constant_loss() {
        let mut model = build_simple_cnn(CnnConfig {
            input_size: 8,
            classes: 2,
            seed: 3,
        })
        .unwrap();
        let mut stream = RngStream::seed(8);
        let images: Vec<Tensor> = (0..10)
            .map(|_| {
                let data = (0..64).map(|_| stream.uniform(0.0, 1.0)).collect();
                Tensor::from_vec(&[1, 8, 8], data).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let before = model.net.params().to_vec();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 10,
            learning_rate: 0.0,
            seed: 0,
        };
        let hist = train_classifier(&mut model, &images, &labels, &config).unwrap();
        assert_eq!(hist.epochs.len(), 3);
        assert_eq!(model.net.params(), &before[..]);
        // Weights never move; epoch losses agree up to f32 summation order.
        let first = hist.epochs[0].loss;
        for e in &hist.epochs {
            assert!((e.loss - first).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = build_simple_cnn(CnnConfig {
            input_size: 8,
            classes: 2,
            seed: 3,
        })
        .unwrap();
        assert!(matches!(
            train_classifier(&mut model, &[], &[], &TrainConfig::default()),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn ae_zero_epochs_identity_on_weights() {
        let mut model = build_unet_autoencoder(AutoencoderConfig {
            input_size: 16,
            latent: 8,
            seed: 2,
        })
        .unwrap();
        let before_enc = model.encoder.params().to_vec();
        let spectra = vec![Tensor::zeros(&[1, 16, 16]); 3];
        let losses = train_autoencoder(
            &mut model,
            &spectra,
            &AeTrainConfig {
                epochs: 0,
                ..AeTrainConfig::default()
            },
        )
        .unwrap();
        assert!(losses.is_empty());
        assert_eq!(model.encoder.params(), &before_enc[..]);
    }

    #[test]
    fn ae_zero_lr_keeps_loss_constant() {
        let mut model = build_unet_autoencoder(AutoencoderConfig {
            input_size: 16,
            latent: 8,
            seed: 2,
        })
        .unwrap();
        let mut stream = RngStream::seed(12);
        let spectra: Vec<Tensor> = (0..6)
            .map(|_| {
                let data = (0..256).map(|_| stream.uniform(0.0, 1.0)).collect();
                Tensor::from_vec(&[1, 16, 16], data).unwrap()
            })
            .collect();
        let before = model.decoder.params().to_vec();
        let config = AeTrainConfig {
            epochs: 2,
            batch_size: 6,
            learning_rate: 0.0,
            ..AeTrainConfig::default()
        };
        let losses = train_autoencoder(&mut model, &spectra, &config).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(model.decoder.params(), &before[..]);
        assert!((losses[0] - losses[1]).abs() < 1e-6);
    }
}
