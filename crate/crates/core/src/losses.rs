//! Training objectives: MSE, SURE, and diffusion-regularized reconstruction
//! for the autoencoder, plus classifier cross-entropy. All losses build tape
//! subgraphs so their gradients flow to whatever produced the inputs.

use crate::numerics::{NumericsError, Reduction, RngStream, Tape, ValueId};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("unknown loss kind '{0}'; expected one of mse, sure, diffusion")]
    UnknownKind(String),
    #[error("sure loss requires sigma > 0 and tau > 0, got sigma={sigma}, tau={tau}")]
    BadSureParams { sigma: f32, tau: f32 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Autoencoder reconstruction objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Sure,
    Diffusion,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Sure => "sure",
            LossKind::Diffusion => "diffusion",
        }
    }

    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Sure, LossKind::Diffusion];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "sure" => Ok(LossKind::Sure),
            "diffusion" => Ok(LossKind::Diffusion),
            other => Err(LossError::UnknownKind(other.to_string())),
        }
    }
}

/// Monte-Carlo SURE settings. The Rademacher probe is drawn per call from an
/// explicit stream.
#[derive(Debug, Clone, Copy)]
pub struct SureParams {
    /// Assumed noise standard deviation.
    pub sigma: f32,
    /// Perturbation scale for the divergence probe.
    pub tau: f32,
    /// Number of probes averaged for the divergence estimate.
    pub probes: usize,
}

impl Default for SureParams {
    fn default() -> Self {
        Self {
            sigma: 0.01,
            tau: 1e-3,
            probes: 1,
        }
    }
}

/// Weight of the smoothness term when `LossKind::Diffusion` is selected.
pub const DIFFUSION_LAMBDA_DEFAULT: f32 = 0.1;

/// Mean of squared differences.
pub fn mse_loss(tape: &mut Tape, pred: ValueId, target: ValueId) -> Result<ValueId, LossError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Mean over interior pixels of squared central differences in both grid
/// directions.
pub fn diffusion_loss(tape: &mut Tape, pred: ValueId) -> Result<ValueId, LossError> {
    Ok(tape.diffusion_penalty(pred)?)
}

/// Stein's unbiased risk estimate for operator `f` at input `y`:
/// `mean((f(y)-y)^2) - sigma^2 + (2 sigma^2 / (N tau)) b.(f(y+tau b)-f(y))`,
/// divergence averaged over `params.probes` Rademacher probes.
pub fn sure_loss<F>(
    tape: &mut Tape,
    mut operator: F,
    y: ValueId,
    params: &SureParams,
    probe_stream: &mut RngStream,
) -> Result<ValueId, LossError>
where
    F: FnMut(&mut Tape, ValueId) -> Result<ValueId, NumericsError>,
{
    if params.sigma <= 0.0 || params.tau <= 0.0 {
        return Err(LossError::BadSureParams {
            sigma: params.sigma,
            tau: params.tau,
        });
    }
    let n = tape.value(y).len() as f32;
    let out = operator(tape, y)?;
    let fidelity = mse_loss(tape, out, y)?;
    let mut divergence: Option<ValueId> = None;
    for _ in 0..params.probes.max(1) {
        let probe_data: Vec<f32> = (0..tape.value(y).len())
            .map(|_| probe_stream.rademacher())
            .collect();
        let shape = tape.shape(y).to_vec();
        let probe = tape.constant(&shape, probe_data)?;
        let scaled = tape.mul_scalar(probe, params.tau);
        let perturbed = tape.add(y, scaled)?;
        let out_perturbed = operator(tape, perturbed)?;
        let delta = tape.sub(out_perturbed, out)?;
        let dotted = tape.mul(delta, probe)?;
        let dot = tape.sum(dotted);
        divergence = Some(match divergence {
            Some(acc) => tape.add(acc, dot)?,
            None => dot,
        });
    }
    let probes = params.probes.max(1) as f32;
    let sigma_sq = params.sigma * params.sigma;
    let div_term = tape.mul_scalar(
        divergence.expect("at least one probe"),
        2.0 * sigma_sq / (n * params.tau * probes),
    );
    let shifted = tape.add_scalar(fidelity, -sigma_sq);
    Ok(tape.add(shifted, div_term)?)
}

/// Reconstruction loss dispatch. `operator` is the model under training
/// (applied once for mse/diffusion, twice for sure).
pub fn composite_recon_loss<F>(
    tape: &mut Tape,
    kind: LossKind,
    mut operator: F,
    input: ValueId,
    sure: &SureParams,
    diffusion_lambda: f32,
    probe_stream: &mut RngStream,
) -> Result<ValueId, LossError>
where
    F: FnMut(&mut Tape, ValueId) -> Result<ValueId, NumericsError>,
{
    match kind {
        LossKind::Mse => {
            let pred = operator(tape, input)?;
            mse_loss(tape, pred, input)
        }
        LossKind::Sure => sure_loss(tape, operator, input, sure, probe_stream),
        LossKind::Diffusion => {
            // A pure smoothness penalty has a degenerate optimum, so the
            // diffusion term regularizes the MSE fidelity instead.
            let pred = operator(tape, input)?;
            let fidelity = mse_loss(tape, pred, input)?;
            if diffusion_lambda == 0.0 {
                return Ok(fidelity);
            }
            let smooth = diffusion_loss(tape, pred)?;
            let weighted = tape.mul_scalar(smooth, diffusion_lambda);
            Ok(tape.add(fidelity, weighted)?)
        }
    }
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: ValueId,
    labels: &[usize],
) -> Result<ValueId, LossError> {
    Ok(tape.cross_entropy(logits, labels, Reduction::Mean)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor as T;

    fn tensor(shape: &[usize], data: Vec<f32>) -> T {
        T::from_vec(shape, data).unwrap()
    }

    #[test]
    fn mse_zero_when_equal_and_one_for_unit_gap() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(&[2], vec![0.3, -0.7]));
        let b = tape.leaf(&tensor(&[2], vec![0.3, -0.7]));
        let l = mse_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        let p = tape.leaf(&tensor(&[2], vec![0.0, 0.0]));
        let t = tape.leaf(&tensor(&[2], vec![1.0, 1.0]));
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l)[0], 1.0);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut stream = RngStream::seed(31);
        let pred: Vec<f32> = (0..16).map(|_| stream.uniform(-1.0, 1.0)).collect();
        let target: Vec<f32> = (0..16).map(|_| stream.uniform(-1.0, 1.0)).collect();
        let mut acc = 0.0f64;
        for (p, t) in pred.iter().zip(&target) {
            acc += f64::from(p - t) * f64::from(p - t);
        }
        let expected = acc / 16.0;
        let mut tape = Tape::new();
        let p = tape.leaf(&tensor(&[16], pred));
        let t = tape.leaf(&tensor(&[16], target));
        let l = mse_loss(&mut tape, p, t).unwrap();
        assert!((f64::from(tape.value(l)[0]) - expected).abs() < 1e-6);
    }

    #[test]
    fn diffusion_constant_is_zero_and_ramp_is_one() {
        let mut tape = Tape::new();
        let c = tape.leaf(&tensor(&[5, 5], vec![0.8; 25]));
        let l = diffusion_loss(&mut tape, c).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);

        let ramp: Vec<f32> = (0..25).map(|i| (i / 5) as f32).collect();
        let r = tape.leaf(&tensor(&[5, 5], ramp));
        let l = diffusion_loss(&mut tape, r).unwrap();
        assert_eq!(tape.value(l)[0], 1.0);
    }

    #[test]
    fn diffusion_matches_loop_oracle() {
        let mut stream = RngStream::seed(32);
        let grid: Vec<f32> = (0..25).map(|_| stream.uniform(0.0, 1.0)).collect();
        let mut acc = 0.0f64;
        for i in 1..4 {
            for j in 1..4 {
                let dr = (f64::from(grid[(i + 1) * 5 + j]) - f64::from(grid[(i - 1) * 5 + j])) / 2.0;
                let dc = (f64::from(grid[i * 5 + j + 1]) - f64::from(grid[i * 5 + j - 1])) / 2.0;
                acc += dr * dr + dc * dc;
            }
        }
        let expected = acc / 9.0;
        let mut tape = Tape::new();
        let g = tape.leaf(&tensor(&[5, 5], grid));
        let l = diffusion_loss(&mut tape, g).unwrap();
        assert!((f64::from(tape.value(l)[0]) - expected).abs() < 1e-6);
    }

    #[test]
    fn diffusion_rejects_tiny_grids() {
        let mut tape = Tape::new();
        let g = tape.leaf(&tensor(&[2, 2], vec![0.0; 4]));
        assert!(diffusion_loss(&mut tape, g).is_err());
    }

    #[test]
    fn sure_identity_operator_gives_sigma_squared() {
        // Dyadic y, tau, and sigma make every intermediate exact in f32.
        let params = SureParams {
            sigma: 0.25,
            tau: 2f32.powi(-10),
            probes: 1,
        };
        for seed in [1u64, 2, 3] {
            let mut stream = RngStream::seed(seed);
            let y_data: Vec<f32> = (0..64).map(|_| stream.next_below(1024) as f32 / 1024.0).collect();
            let mut tape = Tape::new();
            let y = tape.leaf(&tensor(&[64], y_data));
            let l = sure_loss(&mut tape, |_, v| Ok(v), y, &params, &mut stream).unwrap();
            assert_eq!(tape.value(l)[0], 0.0625);
        }
    }

    #[test]
    fn sure_zero_operator_is_mean_square_minus_sigma_squared() {
        let params = SureParams::default();
        let mut stream = RngStream::seed(33);
        let y_data: Vec<f32> = (0..32).map(|_| stream.uniform(0.0, 1.0)).collect();
        let expected = y_data.iter().map(|v| v * v).sum::<f32>() / 32.0 - params.sigma * params.sigma;
        let mut tape = Tape::new();
        let y = tape.leaf(&tensor(&[32], y_data));
        let l = sure_loss(
            &mut tape,
            |t, v| {
                let shape = t.shape(v).to_vec();
                let zero = t.constant(&shape, vec![0.0; t.value(v).len()])?;
                Ok(zero)
            },
            y,
            &params,
            &mut stream,
        )
        .unwrap();
        assert!((tape.value(l)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn sure_divergence_estimates_trace_of_linear_operator() {
        // For f(y) = A y the divergence term converges to 2 sigma^2 tr(A)/N.
        // Off-diagonal mass is kept small so 64 probes sit well inside the
        // 5% tolerance (the Rademacher estimator's variance is driven by the
        // off-diagonal entries).
        let n = 4usize;
        let mut stream = RngStream::seed(34);
        let a_mat: Vec<f32> = (0..n * n)
            .map(|i| {
                if i % n == i / n {
                    stream.uniform(0.5, 1.0)
                } else {
                    stream.uniform(0.0, 0.1)
                }
            })
            .collect();
        let trace: f32 = (0..n).map(|i| a_mat[i * n + i]).sum();
        let params = SureParams {
            sigma: 0.1,
            tau: 1e-3,
            probes: 64,
        };
        let y_data: Vec<f32> = (0..n).map(|_| stream.uniform(0.0, 1.0)).collect();

        let mut tape = Tape::new();
        let y = tape.leaf(&tensor(&[1, n], y_data.clone()));
        let a_for_op = a_mat.clone();
        let full = sure_loss(
            &mut tape,
            move |t, v| {
                let a = t.constant(&[n, n], a_for_op.clone())?;
                t.matmul(v, a)
            },
            y,
            &params,
            &mut stream,
        )
        .unwrap();
        // Subtract the closed-form fidelity-minus-sigma^2 part to isolate the
        // divergence estimate.
        let fy: Vec<f32> = (0..n)
            .map(|j| (0..n).map(|i| y_data[i] * a_mat[i * n + j]).sum())
            .collect();
        let fidelity: f32 = fy
            .iter()
            .zip(&y_data)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f32>()
            / n as f32;
        let sigma_sq = params.sigma * params.sigma;
        let div_est = tape.value(full)[0] - (fidelity - sigma_sq);
        let div_exact = 2.0 * sigma_sq * trace / n as f32;
        assert!(
            (div_est - div_exact).abs() / div_exact.abs() < 0.05,
            "estimate {div_est} vs exact {div_exact}"
        );
    }

    #[test]
    fn sure_rejects_bad_params() {
        let mut tape = Tape::new();
        let y = tape.leaf(&tensor(&[2], vec![0.1, 0.2]));
        let mut stream = RngStream::seed(0);
        let bad = SureParams {
            sigma: 0.0,
            tau: 1e-3,
            probes: 1,
        };
        assert!(matches!(
            sure_loss(&mut tape, |_, v| Ok(v), y, &bad, &mut stream),
            Err(LossError::BadSureParams { .. })
        ));
    }

    #[test]
    fn composite_mse_equals_plain_mse_and_lambda_zero_reduces() {
        let mut stream = RngStream::seed(35);
        let data: Vec<f32> = (0..25).map(|_| stream.uniform(0.0, 1.0)).collect();
        let offset: Vec<f32> = data.iter().map(|v| v * 0.5 + 0.1).collect();

        let op = |out: Vec<f32>| {
            move |t: &mut Tape, v: ValueId| {
                let shape = t.shape(v).to_vec();
                t.constant(&shape, out.clone())
            }
        };
        let mut tape = Tape::new();
        let input = tape.leaf(&tensor(&[5, 5], data.clone()));
        let composite = composite_recon_loss(
            &mut tape,
            LossKind::Mse,
            op(offset.clone()),
            input,
            &SureParams::default(),
            DIFFUSION_LAMBDA_DEFAULT,
            &mut stream,
        )
        .unwrap();
        let pred = tape.leaf(&tensor(&[5, 5], offset.clone()));
        let direct = mse_loss(&mut tape, pred, input).unwrap();
        assert_eq!(tape.value(composite)[0], tape.value(direct)[0]);

        let with_zero_lambda = composite_recon_loss(
            &mut tape,
            LossKind::Diffusion,
            op(offset),
            input,
            &SureParams::default(),
            0.0,
            &mut stream,
        )
        .unwrap();
        assert_eq!(tape.value(with_zero_lambda)[0], tape.value(direct)[0]);
    }

    #[test]
    fn composite_diffusion_on_constant_prediction_is_pure_mse() {
        let mut stream = RngStream::seed(36);
        let data: Vec<f32> = (0..25).map(|_| stream.uniform(0.0, 1.0)).collect();
        let mut tape = Tape::new();
        let input = tape.leaf(&tensor(&[5, 5], data.clone()));
        let l = composite_recon_loss(
            &mut tape,
            LossKind::Diffusion,
            |t, v| {
                let shape = t.shape(v).to_vec();
                t.constant(&shape, vec![0.4; 25])
            },
            input,
            &SureParams::default(),
            DIFFUSION_LAMBDA_DEFAULT,
            &mut stream,
        )
        .unwrap();
        let expected: f32 = data.iter().map(|v| (0.4 - v) * (0.4 - v)).sum::<f32>() / 25.0;
        assert!((tape.value(l)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln4_and_confident_goes_to_zero() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(&tensor(&[1, 4], vec![0.25; 4]));
        let l = cross_entropy(&mut tape, uniform, &[2]).unwrap();
        assert!((tape.value(l)[0] - 4f32.ln()).abs() < 1e-5);

        let confident = tape.leaf(&tensor(&[1, 4], vec![20.0, 0.0, 0.0, 0.0]));
        let l = cross_entropy(&mut tape, confident, &[0]).unwrap();
        assert!(tape.value(l)[0] < 1e-3);
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let mut stream = RngStream::seed(37);
        let (b, c) = (8usize, 4usize);
        let logits: Vec<f32> = (0..b * c).map(|_| stream.uniform(-3.0, 3.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| stream.next_below(c as u64) as usize).collect();
        let mut expected = 0.0f64;
        for i in 0..b {
            let row: Vec<f64> = logits[i * c..(i + 1) * c].iter().map(|&v| f64::from(v)).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            expected += denom.ln() - (row[labels[i]] - m);
        }
        expected /= b as f64;
        let mut tape = Tape::new();
        let l_id = tape.leaf(&tensor(&[b, c], logits));
        let loss = cross_entropy(&mut tape, l_id, &labels).unwrap();
        assert!((f64::from(tape.value(loss)[0]) - expected).abs() < 1e-5);
    }

    #[test]
    fn loss_kind_parses_and_reports_unknowns() {
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("sure".parse::<LossKind>().unwrap(), LossKind::Sure);
        assert_eq!("diffusion".parse::<LossKind>().unwrap(), LossKind::Diffusion);
        let err = "l1".parse::<LossKind>().unwrap_err().to_string();
        assert!(err.contains("mse") && err.contains("sure") && err.contains("diffusion"));
    }
}
