//! Untargeted L-infinity attacks against a differentiable classifier:
//! sign-gradient attacks in pixel space (FGSM, BIM, PGD, Auto-PGD), their
//! wavelet-restricted variants that perturb only the Haar LL band, and the
//! DCT-domain spectrum simulation attack.
//!
//! Budget bookkeeping: pixel attacks project to the eps-ball and [0,1] every
//! step. Wavelet attacks place the budget in coefficient space at 2*eps;
//! the inverse Haar gain of 1/2 makes the induced pixel perturbation at most
//! eps exactly, and detail bands pass through untouched.

use crate::models::{ClassifierModel, ModelError};
use crate::numerics::{NumericsError, Reduction, RngStream, Tape, Tensor};
use crate::transforms::{dct2, dwt_haar, idct2, idwt_haar, DctGrid, WaveletPyramid};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("unknown attack kind '{0}'")]
    UnknownKind(String),
    #[error("epsilon {0} outside [0, 1]")]
    BadEpsilon(f32),
    #[error("alpha must be positive for iterative attacks, got {0}")]
    BadAlpha(f32),
    #[error("steps must be >= {min}, got {got}")]
    BadSteps { min: usize, got: usize },
    #[error("spectrum attack needs at least one transform sample")]
    BadTransformCount,
    #[error("wavelet attacks need even image extents, got {h}x{w}")]
    OddExtent { h: usize, w: usize },
    #[error("labels length {labels} does not match batch size {batch}")]
    LabelMismatch { labels: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    AutoPgd,
    DwtFgsm,
    DwtPgd,
    DwtAutoPgd,
    Spectrum,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::AutoPgd => "autopgd",
            AttackKind::DwtFgsm => "dwt_fgsm",
            AttackKind::DwtPgd => "dwt_pgd",
            AttackKind::DwtAutoPgd => "dwt_autopgd",
            AttackKind::Spectrum => "spectrum",
        }
    }

    pub const ALL: [AttackKind; 8] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::AutoPgd,
        AttackKind::DwtFgsm,
        AttackKind::DwtPgd,
        AttackKind::DwtAutoPgd,
        AttackKind::Spectrum,
    ];
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| AttackError::UnknownKind(s.to_string()))
    }
}

/// Spectrum simulation attack parameters.
#[derive(Debug, Clone, Copy)]
pub struct SpectrumParams {
    /// Number of frequency-domain transform samples averaged per step.
    pub n_transforms: usize,
    /// Std of the additive Gaussian pixel noise; `None` defaults to epsilon.
    pub noise_std: Option<f32>,
    /// Coefficient mask drawn from Uniform[1-rho, 1+rho].
    pub mask_range: f32,
}

impl Default for SpectrumParams {
    fn default() -> Self {
        Self {
            n_transforms: 8,
            noise_std: None,
            mask_range: 0.5,
        }
    }
}

/// A fully specified attack: the kind plus every knob it may need.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub random_start: bool,
    pub spectrum: SpectrumParams,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, epsilon: f32) -> Self {
        Self {
            kind,
            epsilon,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: false,
            spectrum: SpectrumParams::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(AttackError::BadEpsilon(self.epsilon));
        }
        let iterative = !matches!(self.kind, AttackKind::Fgsm | AttackKind::DwtFgsm);
        if iterative && self.steps < 1 {
            return Err(AttackError::BadSteps {
                min: 1,
                got: self.steps,
            });
        }
        let uses_alpha = matches!(
            self.kind,
            AttackKind::Bim | AttackKind::Pgd | AttackKind::DwtPgd | AttackKind::Spectrum
        );
        if uses_alpha && self.alpha <= 0.0 {
            return Err(AttackError::BadAlpha(self.alpha));
        }
        if matches!(self.kind, AttackKind::AutoPgd | AttackKind::DwtAutoPgd) && self.steps < 5 {
            return Err(AttackError::BadSteps {
                min: 5,
                got: self.steps,
            });
        }
        if matches!(self.kind, AttackKind::Spectrum) && self.spectrum.n_transforms == 0 {
            return Err(AttackError::BadTransformCount);
        }
        Ok(())
    }
}

/// Originals, perturbed images, and per-image audit columns.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<usize>,
    pub linf_norms: Vec<f32>,
    /// Whether the clean image was classified correctly.
    pub clean_correct: Vec<bool>,
    pub adv_predictions: Vec<usize>,
    /// Prediction changed away from the true label on an originally correct
    /// image.
    pub success: Vec<bool>,
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Successful flips over originally-correct images.
    pub fn success_rate(&self) -> f32 {
        let denom = self.clean_correct.iter().filter(|&&c| c).count();
        if denom == 0 {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f32 / denom as f32
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn batch_dims(x: &Tensor) -> Result<(usize, usize, usize), AttackError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(AttackError::Numerics(NumericsError::ShapeMismatch {
            expected: vec![0, 1, 0, 0],
            got: s.to_vec(),
            context: "attack input".into(),
        }));
    }
    Ok((s[0], s[2], s[3]))
}

/// Per-sample cross-entropy values and the gradient of their sum w.r.t. the
/// input pixels.
fn loss_and_gradient(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Vec<f32>, Vec<f32>), AttackError> {
    let mut tape = Tape::new();
    let mut input = x.clone();
    input.set_requires_grad(true);
    let x_id = tape.leaf(&input);
    let params = model.net.register_params(&mut tape, false);
    let logits = model.net.forward_with(&mut tape, &params, x_id)?;
    let loss = tape.cross_entropy(logits, labels, Reduction::Sum)?;
    let per_sample = tape
        .cross_entropy_per_sample(loss)
        .expect("cross entropy node")
        .to_vec();
    tape.backward(loss)?;
    let grad = tape.grad(x_id).expect("input requires grad").to_vec();
    Ok((per_sample, grad))
}

fn clamp01(data: &mut [f32]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Project into the eps-ball around `origin`, then into [0,1].
fn project(data: &mut [f32], origin: &[f32], eps: f32) {
    for (v, &o) in data.iter_mut().zip(origin) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// One-step sign attack: `clamp(x + eps * sign(grad x J))`.
pub fn fgsm(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
) -> Result<Tensor, AttackError> {
    check_labels(x, labels)?;
    let (_, grad) = loss_and_gradient(model, x, labels)?;
    let mut out = x.clone();
    for (v, g) in out.data_mut().iter_mut().zip(&grad) {
        *v += epsilon * sign(*g);
    }
    clamp01(out.data_mut());
    Ok(out)
}

/// Iterated FGSM with per-step projection to the eps-ball and [0,1].
pub fn bim(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
) -> Result<Tensor, AttackError> {
    check_labels(x, labels)?;
    let origin = x.data().to_vec();
    let mut cur = x.clone();
    for _ in 0..steps {
        let (_, grad) = loss_and_gradient(model, &cur, labels)?;
        for (v, g) in cur.data_mut().iter_mut().zip(&grad) {
            *v += alpha * sign(*g);
        }
        project(cur.data_mut(), &origin, epsilon);
    }
    Ok(cur)
}

/// BIM with an optional uniform random start inside the eps-ball.
pub fn pgd(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
    random_start: bool,
    stream: &RngStream,
) -> Result<Tensor, AttackError> {
    check_labels(x, labels)?;
    let origin = x.data().to_vec();
    let mut cur = x.clone();
    if random_start {
        let per_image = x.numel() / x.shape()[0];
        for (i, chunk) in cur.data_mut().chunks_mut(per_image).enumerate() {
            let mut s = stream.derive("pgd_init").derive_index(i as u64);
            for v in chunk.iter_mut() {
                *v += s.uniform(-epsilon, epsilon);
            }
        }
        project(cur.data_mut(), &origin, epsilon);
    }
    for _ in 0..steps {
        let (_, grad) = loss_and_gradient(model, &cur, labels)?;
        for (v, g) in cur.data_mut().iter_mut().zip(&grad) {
            *v += alpha * sign(*g);
        }
        project(cur.data_mut(), &origin, epsilon);
    }
    Ok(cur)
}

/// Checkpoint fractions from p0=0, p1=0.22,
/// p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06), scaled to step indices.
fn autopgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut fractions = vec![0.0f64, 0.22];
    while *fractions.last().expect("nonempty") < 1.0 {
        let last = fractions[fractions.len() - 1];
        let prev = fractions[fractions.len() - 2];
        fractions.push(last + (last - prev - 0.03).max(0.06));
    }
    let mut indices: Vec<usize> = fractions
        .iter()
        .skip(1)
        .map(|p| (p * steps as f64).ceil() as usize)
        .filter(|&w| w > 0 && w < steps)
        .collect();
    indices.dedup();
    indices
}

/// Generic Auto-PGD loop over an optimization state with per-image step-size
/// halving and best-iterate restarts. `Space` abstracts pixel vs LL domain.
struct AutoPgdState {
    /// Current iterate per image (space coordinates).
    current: Vec<Vec<f32>>,
    alpha: Vec<f32>,
    best: Vec<Vec<f32>>,
    best_loss: Vec<f32>,
    prev_loss: Vec<f32>,
    increased: Vec<usize>,
    ckpt_alpha: Vec<f32>,
    ckpt_best_loss: Vec<f32>,
}

fn auto_pgd_generic<E, P>(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    steps: usize,
    alpha0: f32,
    mut evaluate: E,
    mut project_space: P,
    per_image_len: usize,
    init: Vec<Vec<f32>>,
) -> Result<Vec<Vec<f32>>, AttackError>
where
    // (coords per image) -> (per-sample loss, per-image gradient in space)
    E: FnMut(&ClassifierModel, &[Vec<f32>], &[usize]) -> Result<(Vec<f32>, Vec<Vec<f32>>), AttackError>,
    P: FnMut(usize, &mut [f32]),
{
    let bsz = x.shape()[0];
    debug_assert_eq!(init.len(), bsz);
    debug_assert!(init.iter().all(|c| c.len() == per_image_len));
    let checkpoints = autopgd_checkpoints(steps);
    let (loss0, _) = evaluate(model, &init, labels)?;
    let mut state = AutoPgdState {
        current: init.clone(),
        alpha: vec![alpha0; bsz],
        best: init,
        best_loss: loss0.clone(),
        prev_loss: loss0,
        increased: vec![0; bsz],
        ckpt_alpha: vec![alpha0; bsz],
        ckpt_best_loss: vec![f32::NEG_INFINITY; bsz],
    };
    let mut last_ckpt = 0usize;
    for t in 1..=steps {
        let (_, grads) = evaluate(model, &state.current, labels)?;
        for i in 0..bsz {
            for (v, g) in state.current[i].iter_mut().zip(&grads[i]) {
                *v += state.alpha[i] * sign(*g);
            }
            project_space(i, &mut state.current[i]);
        }
        let (loss_t, _) = evaluate(model, &state.current, labels)?;
        for i in 0..bsz {
            if loss_t[i] > state.prev_loss[i] {
                state.increased[i] += 1;
            }
            if loss_t[i] > state.best_loss[i] {
                state.best_loss[i] = loss_t[i];
                state.best[i] = state.current[i].clone();
            }
            state.prev_loss[i] = loss_t[i];
        }
        if checkpoints.contains(&t) {
            let window = t - last_ckpt;
            for i in 0..bsz {
                let too_few = (state.increased[i] as f32) < 0.75 * window as f32;
                let stalled = state.alpha[i] == state.ckpt_alpha[i]
                    && state.best_loss[i] == state.ckpt_best_loss[i];
                if too_few || stalled {
                    state.alpha[i] /= 2.0;
                    state.current[i] = state.best[i].clone();
                    state.prev_loss[i] = state.best_loss[i];
                }
                state.ckpt_alpha[i] = state.alpha[i];
                state.ckpt_best_loss[i] = state.best_loss[i];
                state.increased[i] = 0;
            }
            last_ckpt = t;
        }
    }
    Ok(state.best)
}

/// Auto-PGD in pixel space: starts at alpha = 2*eps, halves on stagnation,
/// returns the best-loss iterate.
pub fn auto_pgd(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    steps: usize,
) -> Result<Tensor, AttackError> {
    check_labels(x, labels)?;
    let (bsz, h, w) = batch_dims(x)?;
    let per = h * w;
    let origin = x.data().to_vec();
    let init: Vec<Vec<f32>> = (0..bsz)
        .map(|i| origin[i * per..(i + 1) * per].to_vec())
        .collect();
    let origin_for_proj = origin.clone();
    let best = auto_pgd_generic(
        model,
        x,
        labels,
        steps,
        2.0 * epsilon,
        |model, coords, labels| {
            let tensor = coords_to_tensor(coords, &[bsz, 1, h, w]);
            let (loss, grad) = loss_and_gradient(model, &tensor, labels)?;
            Ok((loss, split_rows(&grad, per)))
        },
        |i, coords| {
            let o = &origin_for_proj[i * per..(i + 1) * per];
            for (v, &ov) in coords.iter_mut().zip(o) {
                *v = v.clamp(ov - epsilon, ov + epsilon).clamp(0.0, 1.0);
            }
        },
        per,
        init,
    )?;
    Ok(coords_to_tensor(&best, &[bsz, 1, h, w]))
}

fn coords_to_tensor(coords: &[Vec<f32>], shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(coords.iter().map(Vec::len).sum());
    for c in coords {
        data.extend_from_slice(c);
    }
    Tensor::from_vec(shape, data).expect("coords match shape")
}

fn split_rows(data: &[f32], per: usize) -> Vec<Vec<f32>> {
    data.chunks(per).map(|c| c.to_vec()).collect()
}

/// Which update rule drives a wavelet-domain attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwtInner {
    Fgsm,
    Pgd,
    AutoPgd,
}

/// Wavelet-restricted attack: optimizes only the Haar LL band with budget
/// 2*eps in coefficient space, reconstructing with the original detail bands
/// each step; the final image is clamped to [0,1].
pub fn dwt_attack(
    inner: DwtInner,
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
) -> Result<Tensor, AttackError> {
    Ok(dwt_attack_full(inner, model, x, labels, epsilon, alpha, steps)?.1)
}

/// The final reconstruction before the [0,1] clamp; only there does the
/// detail-band preservation guarantee hold bit-for-tolerance.
pub fn dwt_attack_preclamp(
    inner: DwtInner,
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
) -> Result<Tensor, AttackError> {
    Ok(dwt_attack_full(inner, model, x, labels, epsilon, alpha, steps)?.0)
}

fn dwt_attack_full(
    inner: DwtInner,
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
) -> Result<(Tensor, Tensor), AttackError> {
    check_labels(x, labels)?;
    let (bsz, h, w) = batch_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(AttackError::OddExtent { h, w });
    }
    let per = h * w;
    let eps_ll = 2.0 * epsilon;
    // Coefficient-space step mirrors the 2x budget scaling.
    let alpha_ll = 2.0 * alpha;

    let mut pyramids: Vec<WaveletPyramid> = Vec::with_capacity(bsz);
    for i in 0..bsz {
        let pixels: Vec<f64> = x.data()[i * per..(i + 1) * per]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        pyramids.push(dwt_haar(h, w, &pixels).expect("even extents checked"));
    }
    let ll0: Vec<Vec<f32>> = pyramids
        .iter()
        .map(|p| p.ll.iter().map(|&v| v as f32).collect())
        .collect();

    let reconstruct = |lls: &[Vec<f32>]| -> Tensor {
        let mut data = Vec::with_capacity(bsz * per);
        for (p, ll) in pyramids.iter().zip(lls) {
            let mut pyr = p.clone();
            for (dst, &src) in pyr.ll.iter_mut().zip(ll) {
                *dst = f64::from(src);
            }
            data.extend(idwt_haar(&pyr).iter().map(|&v| v as f32));
        }
        Tensor::from_vec(&[bsz, 1, h, w], data).expect("sized buffer")
    };
    // Adjoint chain: since IDWT is orthonormal-linear, grad wrt LL is the LL
    // band of DWT(grad wrt pixels).
    let ll_gradient = |grad: &[f32]| -> Vec<Vec<f32>> {
        (0..bsz)
            .map(|i| {
                let g: Vec<f64> = grad[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                dwt_haar(h, w, &g)
                    .expect("even extents checked")
                    .ll
                    .iter()
                    .map(|&v| v as f32)
                    .collect()
            })
            .collect()
    };

    let final_ll = match inner {
        DwtInner::Fgsm => {
            let x0 = reconstruct(&ll0);
            let (_, grad) = loss_and_gradient(model, &x0, labels)?;
            let gll = ll_gradient(&grad);
            ll0.iter()
                .zip(&gll)
                .map(|(base, g)| {
                    base.iter()
                        .zip(g)
                        .map(|(&b, &gv)| b + eps_ll * sign(gv))
                        .collect()
                })
                .collect::<Vec<Vec<f32>>>()
        }
        DwtInner::Pgd => {
            let mut current = ll0.clone();
            for _ in 0..steps {
                let xt = reconstruct(&current);
                let (_, grad) = loss_and_gradient(model, &xt, labels)?;
                let gll = ll_gradient(&grad);
                for (i, cur) in current.iter_mut().enumerate() {
                    for ((v, g), &base) in cur.iter_mut().zip(&gll[i]).zip(&ll0[i]) {
                        *v = (*v + alpha_ll * sign(*g)).clamp(base - eps_ll, base + eps_ll);
                    }
                }
            }
            current
        }
        DwtInner::AutoPgd => {
            let ll0_proj = ll0.clone();
            auto_pgd_generic(
                model,
                x,
                labels,
                steps,
                2.0 * eps_ll,
                |model, coords, labels| {
                    let xt = reconstruct(coords);
                    let (loss, grad) = loss_and_gradient(model, &xt, labels)?;
                    Ok((loss, ll_gradient(&grad)))
                },
                |i, coords| {
                    for (v, &base) in coords.iter_mut().zip(&ll0_proj[i]) {
                        *v = v.clamp(base - eps_ll, base + eps_ll);
                    }
                },
                (h / 2) * (w / 2),
                ll0.clone(),
            )?
        }
    };
    let preclamp = reconstruct(&final_ll);
    let mut clamped = preclamp.clone();
    clamp01(clamped.data_mut());
    Ok((preclamp, clamped))
}

/// Gradient averaged over random DCT-domain transforms of the input, then a
/// BIM-style projected update. The transform chain is self-adjoint, so the
/// gradient w.r.t. the untransformed input is idct(mask * dct(grad)).
#[allow(clippy::too_many_arguments)]
pub fn spectrum_attack(
    model: &ClassifierModel,
    x: &Tensor,
    labels: &[usize],
    epsilon: f32,
    alpha: f32,
    steps: usize,
    params: &SpectrumParams,
    stream: &RngStream,
) -> Result<Tensor, AttackError> {
    check_labels(x, labels)?;
    if params.n_transforms == 0 {
        return Err(AttackError::BadTransformCount);
    }
    let (bsz, h, w) = batch_dims(x)?;
    let per = h * w;
    let sigma = params.noise_std.unwrap_or(epsilon);
    let rho = params.mask_range;
    let identity_transform = sigma == 0.0 && rho == 0.0;
    let origin = x.data().to_vec();
    let mut cur = x.clone();
    for t in 0..steps {
        let step_stream = stream.derive("spectrum").derive_index(t as u64);
        let mut grad_acc = vec![0.0f64; bsz * per];
        for n in 0..params.n_transforms {
            let sample_stream = step_stream.derive_index(n as u64);
            if identity_transform {
                // The transform is exactly the identity; skip the round trip
                // so sign(0) stays 0 on flat-gradient pixels.
                let (_, grad) = loss_and_gradient(model, &cur, labels)?;
                for (acc, g) in grad_acc.iter_mut().zip(&grad) {
                    *acc += f64::from(*g);
                }
                continue;
            }
            let mut transformed = vec![0.0f32; bsz * per];
            let mut masks: Vec<Vec<f64>> = Vec::with_capacity(bsz);
            for i in 0..bsz {
                let mut s = sample_stream.derive_index(i as u64);
                let mut noisy: Vec<f64> = cur.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| f64::from(v) + f64::from(s.normal(0.0, sigma)))
                    .collect();
                let mask: Vec<f64> = (0..per)
                    .map(|_| f64::from(s.uniform(1.0 - rho, 1.0 + rho)))
                    .collect();
                let mut grid = dct2(h, w, &noisy);
                for (c, m) in grid.coeffs.iter_mut().zip(&mask) {
                    *c *= m;
                }
                noisy = idct2(&grid);
                for (dst, &v) in transformed[i * per..(i + 1) * per].iter_mut().zip(&noisy) {
                    *dst = v as f32;
                }
                masks.push(mask);
            }
            let xt = Tensor::from_vec(&[bsz, 1, h, w], transformed)?;
            let (_, grad) = loss_and_gradient(model, &xt, labels)?;
            for i in 0..bsz {
                let g: Vec<f64> = grad[i * per..(i + 1) * per]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                let mut grid = dct2(h, w, &g);
                for (c, m) in grid.coeffs.iter_mut().zip(&masks[i]) {
                    *c *= m;
                }
                let chained = idct2(&DctGrid {
                    h,
                    w,
                    coeffs: grid.coeffs,
                });
                for (acc, v) in grad_acc[i * per..(i + 1) * per].iter_mut().zip(&chained) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / params.n_transforms as f64;
        for (v, acc) in cur.data_mut().iter_mut().zip(&grad_acc) {
            *v += alpha * sign((acc * scale) as f32);
        }
        project(cur.data_mut(), &origin, epsilon);
    }
    Ok(cur)
}

fn check_labels(x: &Tensor, labels: &[usize]) -> Result<(), AttackError> {
    let bsz = x.shape().first().copied().unwrap_or(0);
    if labels.len() != bsz {
        return Err(AttackError::LabelMismatch {
            labels: labels.len(),
            batch: bsz,
        });
    }
    Ok(())
}

/// Dispatch an attack spec over a labeled batch and fill the audit columns.
/// Large batches are processed in fixed-size chunks; per-image randomness is
/// keyed by absolute position so chunking never changes results.
pub fn run_attack(
    spec: &AttackSpec,
    model: &ClassifierModel,
    images: &Tensor,
    labels: &[usize],
) -> Result<AdversarialBatch, AttackError> {
    spec.validate()?;
    check_labels(images, labels)?;
    let (bsz, h, w) = batch_dims(images)?;
    let per = h * w;
    const CHUNK: usize = 32;
    let mut perturbed_data = Vec::with_capacity(bsz * per);
    let mut start = 0usize;
    while start < bsz {
        let end = (start + CHUNK).min(bsz);
        let chunk_data = images.data()[start * per..end * per].to_vec();
        let chunk = Tensor::from_vec(&[end - start, 1, h, w], chunk_data)?;
        let chunk_labels = &labels[start..end];
        let chunk_stream = RngStream::seed(spec.seed).derive("attack").derive_index(start as u64);
        let adv = match spec.kind {
            AttackKind::Fgsm => fgsm(model, &chunk, chunk_labels, spec.epsilon)?,
            AttackKind::Bim => bim(
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
            )?,
            AttackKind::Pgd => pgd(
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
                spec.random_start,
                &chunk_stream,
            )?,
            AttackKind::AutoPgd => {
                auto_pgd(model, &chunk, chunk_labels, spec.epsilon, spec.steps)?
            }
            AttackKind::DwtFgsm => dwt_attack(
                DwtInner::Fgsm,
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
            )?,
            AttackKind::DwtPgd => dwt_attack(
                DwtInner::Pgd,
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
            )?,
            AttackKind::DwtAutoPgd => dwt_attack(
                DwtInner::AutoPgd,
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
            )?,
            AttackKind::Spectrum => spectrum_attack(
                model,
                &chunk,
                chunk_labels,
                spec.epsilon,
                spec.alpha,
                spec.steps,
                &spec.spectrum,
                &chunk_stream,
            )?,
        };
        perturbed_data.extend_from_slice(adv.data());
        start = end;
    }
    let perturbed = Tensor::from_vec(images.shape(), perturbed_data)?;

    let mut linf_norms = Vec::with_capacity(bsz);
    for i in 0..bsz {
        let norm = images.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&perturbed.data()[i * per..(i + 1) * per])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        linf_norms.push(norm);
    }
    let (clean_pred, adv_pred) = if bsz == 0 {
        (Vec::new(), Vec::new())
    } else {
        (model.predict(images)?, model.predict(&perturbed)?)
    };
    let clean_correct: Vec<bool> = clean_pred.iter().zip(labels).map(|(p, y)| p == y).collect();
    let success: Vec<bool> = adv_pred
        .iter()
        .zip(labels)
        .zip(&clean_correct)
        .map(|((p, y), &ok)| ok && p != y)
        .collect();
    Ok(AdversarialBatch {
        original: images.clone(),
        perturbed,
        labels: labels.to_vec(),
        linf_norms,
        clean_correct,
        adv_predictions: adv_pred,
        success,
    })
}
