//! Data-generating processes for benchmarks and oracles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::series::TimeSeries;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum SimModel {
    /// X_t = A1 X_{t-1} + A2 X_{t-2} + A3 X_{t-3} + eps_t.
    Var3 { a: [Mat; 3], noise_sd: f64 },
    /// Regime-switching VAR on the sign of the coordinate sum of X_{t-1}.
    Threshold3 { a: [Mat; 3], b: [Mat; 3], noise_sd: f64 },
    /// Component-wise ARCH recursions mixed by a 3x3 matrix.
    Arch3 {
        mixing: Mat,
        /// Per coordinate j: (intercept, lag-1, lag-2, lag-3) coefficients of h_{t,j}.
        coeffs: [[f64; 4]; 3],
        noise_sd: f64,
    },
    Ar1 { a: f64, noise_sd: f64 },
    IidNoise { d: usize, sd: f64 },
}

fn mat3(rows: [[f64; 3]; 3]) -> Mat {
    Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// The three benchmark processes with their exact coefficients. The noise is
/// Normal(0, 0.5), read as standard deviation 0.5 by default; pass
/// `noise_is_variance` to read 0.5 as the variance instead.
pub fn paper_model(id: u8, noise_is_variance: bool) -> Result<SimModel> {
    let sd = if noise_is_variance { 0.5f64.sqrt() } else { 0.5 };
    let a1 = mat3([[0.5, -0.2, -0.2], [-0.2, 0.5, -0.2], [-0.2, -0.2, 0.5]]);
    let a2 = mat3([[-0.5, 0.2, 0.2], [0.2, -0.5, 0.2], [0.2, 0.2, -0.5]]);
    let a3 = mat3([[0.4, -0.1, -0.1], [-0.1, 0.4, -0.1], [-0.1, -0.1, 0.4]]);
    match id {
        1 => Ok(SimModel::Var3 { a: [a1, a2, a3], noise_sd: sd }),
        2 => {
            let b1 = mat3([[0.3, -0.1, -0.1], [-0.1, 0.3, -0.1], [-0.1, -0.3, 0.3]]);
            let b2 = mat3([[-0.3, 0.1, 0.1], [0.1, -0.3, 0.1], [0.1, 0.1, -0.3]]);
            let b3 = mat3([
                [0.25, -0.05, -0.05],
                [-0.05, 0.25, -0.05],
                [-0.05, -0.05, 0.25],
            ]);
            Ok(SimModel::Threshold3 { a: [a1, a2, a3], b: [b1, b2, b3], noise_sd: sd })
        }
        3 => Ok(SimModel::Arch3 {
            mixing: mat3([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0]]),
            coeffs: [
                [0.1, 0.6, 0.0, 0.35],
                [0.2, 0.8, 0.05, 0.1],
                [0.1, 0.3, 0.0, 0.65],
            ],
            noise_sd: sd,
        }),
        other => Err(Error::Input(format!("unknown benchmark model id {other} (expected 1-3)"))),
    }
}

impl SimModel {
    pub fn dim(&self) -> usize {
        match self {
            SimModel::Var3 { .. } | SimModel::Threshold3 { .. } | SimModel::Arch3 { .. } => 3,
            SimModel::Ar1 { .. } => 1,
            SimModel::IidNoise { d, .. } => *d,
        }
    }

    /// Spectral radius of the VAR companion matrix, when applicable.
    pub fn companion_spectral_radius(&self) -> Option<f64> {
        let coeffs: &[Mat; 3] = match self {
            SimModel::Var3 { a, .. } => a,
            SimModel::Threshold3 { a, .. } => a,
            _ => return None,
        };
        let d = 3;
        let p = 3;
        let mut comp = nalgebra::DMatrix::<f64>::zeros(d * p, d * p);
        for (lag, m) in coeffs.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    comp[(i, lag * d + j)] = m.get(i, j);
                }
            }
        }
        for i in 0..d * (p - 1) {
            comp[(d + i, i)] = 1.0;
        }
        let radius = comp
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max);
        Some(radius)
    }
}

fn mat_vec3(m: &Mat, x: &[f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let r = m.row(i);
        out[i] = r[0] * x[0] + r[1] * x[1] + r[2] * x[2];
    }
    out
}

/// Iterate the recursion from a zero initial state for `burn_in + t_len`
/// steps, discarding the first `burn_in`. Deterministic per RNG state.
pub fn simulate(
    model: &SimModel,
    t_len: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TimeSeries> {
    if t_len == 0 {
        return Err(Error::Input("series length must be >= 1".into()));
    }
    if let Some(r) = model.companion_spectral_radius() {
        if r >= 1.0 {
            eprintln!("warning: companion spectral radius {r:.3} >= 1; process may explode");
        }
    }
    let total = burn_in + t_len;
    let d = model.dim();
    let mut out = Mat::zeros(t_len, d);
    let check = |step: usize, v: &[f64]| -> Result<()> {
        if v.iter().any(|x| !x.is_finite() || x.abs() > 1e12) {
            return Err(Error::Simulation(format!("state diverged at step {step}")));
        }
        Ok(())
    };

    match model {
        SimModel::Var3 { a, noise_sd } | SimModel::Threshold3 { a, noise_sd, .. } => {
            let b = match model {
                SimModel::Threshold3 { b, .. } => Some(b),
                _ => None,
            };
            let mut hist = [[0.0f64; 3]; 3]; // hist[0] = X_{t-1}
            for step in 0..total {
                let coeffs: &[Mat; 3] = match b {
                    Some(bm) if hist[0].iter().sum::<f64>() > 0.0 => bm,
                    _ => a,
                };
                let mut x = [0.0f64; 3];
                for lag in 0..3 {
                    let contrib = mat_vec3(&coeffs[lag], &hist[lag]);
                    for i in 0..3 {
                        x[i] += contrib[i];
                    }
                }
                for v in &mut x {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    *v += noise_sd * z;
                }
                check(step, &x)?;
                hist = [x, hist[0], hist[1]];
                if step >= burn_in {
                    out.row_mut(step - burn_in).copy_from_slice(&x);
                }
            }
        }
        SimModel::Arch3 { mixing, coeffs, noise_sd } => {
            // latent squared-history per coordinate, h initialized at its intercept
            let mut hist = [[0.0f64; 3]; 3]; // latent X-tilde lags
            for step in 0..total {
                let mut latent = [0.0f64; 3];
                for j in 0..3 {
                    let c = &coeffs[j];
                    let h = c[0]
                        + c[1] * hist[0][j] * hist[0][j]
                        + c[2] * hist[1][j] * hist[1][j]
                        + c[3] * hist[2][j] * hist[2][j];
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    latent[j] = h.sqrt() * noise_sd * z;
                }
                let x = mat_vec3(mixing, &latent);
                check(step, &x)?;
                hist = [latent, hist[0], hist[1]];
                if step >= burn_in {
                    out.row_mut(step - burn_in).copy_from_slice(&x);
                }
            }
        }
        SimModel::Ar1 { a, noise_sd } => {
            let mut prev = 0.0;
            for step in 0..total {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let x = a * prev + noise_sd * z;
                check(step, &[x])?;
                prev = x;
                if step >= burn_in {
                    out.row_mut(step - burn_in)[0] = x;
                }
            }
        }
        SimModel::IidNoise { d, sd } => {
            for step in 0..total {
                if step >= burn_in {
                    let row = out.row_mut(step - burn_in);
                    for v in row.iter_mut() {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        *v = sd * z;
                    }
                } else {
                    for _ in 0..*d {
                        let _: f64 = rng.sample(rand_distr::StandardNormal);
                    }
                }
            }
        }
    }
    TimeSeries::new(out)
}

pub const DEFAULT_BURN_IN: usize = 200;
