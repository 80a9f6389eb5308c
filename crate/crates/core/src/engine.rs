//! The Markov property test.
//!
//! Pipeline: split the (lag-embedded) series into chunks, fit forward and
//! backward conditional generators on the leading chunks, Monte Carlo the
//! conditional characteristic functions, form the doubly robust cross-fitted
//! statistic over random frequency pairs and lags, estimate per-lag
//! covariances, and calibrate the rejection threshold with a Gaussian
//! multiplier bootstrap. Run sequentially over embedding orders, the first
//! non-rejection estimates the Markov order.

use std::ops::Range;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::mdn::{select_g, FactorizedConditionalModel, TrainConfig};
use crate::rngutil::substream;
use crate::series::{embed, ColumnType, TimeSeries};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatVariant {
    DoublyRobust,
    Plugin,
}

impl std::fmt::Display for StatVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StatVariant::DoublyRobust => write!(f, "doubly_robust"),
            StatVariant::Plugin => write!(f, "plugin"),
        }
    }
}

/// All pipeline hyper-parameters. Deserialization fills omitted fields with
/// the defaults, so partial JSON configs are accepted.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TestConfig {
    /// Number of data chunks L.
    pub chunks: usize,
    /// Number of random frequency pairs B.
    pub freq_pairs: usize,
    /// Monte Carlo samples M per conditioning point.
    pub mc_samples: usize,
    /// Largest lag Q.
    pub max_lag: usize,
    pub alpha: f64,
    pub n_boot: usize,
    pub variant: StatVariant,
    /// Override for the bootstrap quantile level (default 1 - alpha/2).
    pub quantile_level: Option<f64>,
    /// Columns whose next-step law is tested; None tests the full vector.
    pub test_dims: Option<Vec<usize>>,
    /// Fixed mixture size; None selects G by cross-validation on the grid.
    pub mixture_size: Option<usize>,
    pub g_grid: Vec<usize>,
    pub cv_folds: usize,
    pub mdn: TrainConfig,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            chunks: 3,
            freq_pairs: 1000,
            mc_samples: 100,
            max_lag: 10,
            alpha: 0.05,
            n_boot: 2000,
            variant: StatVariant::DoublyRobust,
            quantile_level: None,
            test_dims: None,
            mixture_size: None,
            g_grid: vec![1, 2, 3, 5, 8],
            cv_folds: 4,
            mdn: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl TestConfig {
    /// Validate against the length of the (embedded) series the test runs on.
    pub fn validate(&self, t_embedded: usize) -> Result<()> {
        if self.chunks < 2 {
            return Err(Error::Config("number of chunks L must be >= 2".into()));
        }
        if self.max_lag < 2 {
            return Err(Error::Config("largest lag Q must be >= 2".into()));
        }
        if self.freq_pairs < 1 || self.mc_samples < 1 {
            return Err(Error::Config("B and M must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must be in (0, 1)".into()));
        }
        if self.n_boot < 500 {
            return Err(Error::Config("n_boot must be >= 500".into()));
        }
        let min_t = self.chunks * (self.max_lag + 2);
        if t_embedded < min_t {
            return Err(Error::Config(format!(
                "series too short: need at least L*(Q+2) = {min_t} usable rows, got {t_embedded}"
            )));
        }
        let n = t_embedded / self.chunks;
        if self.max_lag > n - 1 {
            return Err(Error::Config(format!(
                "largest lag Q = {} must be <= n-1 = {}",
                self.max_lag,
                n - 1
            )));
        }
        if let Some(g) = self.mixture_size {
            if g < 1 {
                return Err(Error::Config("mixture size G must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// n = floor(T/L) and the L chunk index ranges (0-based, half-open). Trailing
/// rows beyond L*n are discarded.
pub fn chunk_indices(t_len: usize, chunks: usize) -> Result<(usize, Vec<Range<usize>>)> {
    if chunks < 2 {
        return Err(Error::Config("number of chunks L must be >= 2".into()));
    }
    let n = t_len / chunks;
    if n == 0 {
        return Err(Error::Config(format!(
            "series of length {t_len} cannot be split into {chunks} chunks (need at least {chunks} rows)"
        )));
    }
    let ranges = (0..chunks).map(|l| l * n..(l + 1) * n).collect();
    Ok((n, ranges))
}

/// Random frequency pairs, rows i.i.d. standard normal.
#[derive(Clone, Debug)]
pub struct FrequencySet {
    pub mu: Mat,
    pub nu: Mat,
}

pub fn sample_frequencies(
    b: usize,
    mu_dim: usize,
    nu_dim: usize,
    rng: &mut ChaCha8Rng,
) -> FrequencySet {
    let mut mu = Mat::zeros(b, mu_dim);
    for v in mu.data_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    let mut nu = Mat::zeros(b, nu_dim);
    for v in nu.data_mut() {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    FrequencySet { mu, nu }
}

/// The test problem after lag embedding.
///
/// Row t of `y` is the concatenation (X_t, ..., X_{t+k-1}). The forward
/// generator models only the new block X_{t+k} given row t (restricted to
/// `target_cols` when a column subset is under test); the backward generator
/// models the departing block X_{t-1} given row t. `targets` holds, per row,
/// the argument of the first exponential of the statistic: the full embedded
/// row by default, or the tested sub-vector of the newest observation under a
/// column subset.
#[derive(Clone, Debug)]
pub struct EmbeddedProblem {
    pub y: TimeSeries,
    pub base_dim: usize,
    pub k: usize,
    pub targets: Mat,
    /// Base-series columns modeled by the forward generator.
    pub target_cols: Vec<usize>,
    pub target_types: Vec<ColumnType>,
    /// Whether `targets` is a restricted sub-vector (no reconstruction).
    pub subset: bool,
}

impl EmbeddedProblem {
    pub fn new(series: &TimeSeries, k: usize, test_dims: Option<&[usize]>) -> Result<Self> {
        let d = series.dim();
        let y = embed(series, k)?;
        let (target_cols, subset) = match test_dims {
            None => ((0..d).collect::<Vec<_>>(), false),
            Some(idx) => {
                if idx.is_empty() {
                    return Err(Error::Config("test_dims must be nonempty".into()));
                }
                let mut seen = vec![false; d];
                for &j in idx {
                    if j >= d {
                        return Err(Error::Config(format!(
                            "test_dims column {j} out of range (series has {d} columns)"
                        )));
                    }
                    if seen[j] {
                        return Err(Error::Config(format!("test_dims column {j} repeated")));
                    }
                    seen[j] = true;
                }
                (idx.to_vec(), true)
            }
        };
        let full_dim = d * k;
        let targets = if subset {
            // tested sub-vector of the newest block of each embedded row
            let cols: Vec<usize> = target_cols.iter().map(|&j| d * (k - 1) + j).collect();
            y.values.select_cols(&cols)
        } else {
            y.values.clone()
        };
        let target_types = target_cols.iter().map(|&j| series.column_types[j]).collect();
        let _ = full_dim;
        Ok(EmbeddedProblem {
            y,
            base_dim: d,
            k,
            targets,
            target_cols,
            target_types,
            subset,
        })
    }

    pub fn full_dim(&self) -> usize {
        self.base_dim * self.k
    }

    /// New-block response values for the forward generator at embedded row s:
    /// the tested columns of X_{s+k-1} (i.e., of the newest block of row s).
    fn forward_response(&self, s: usize) -> Vec<f64> {
        let d = self.base_dim;
        let row = self.y.row(s);
        self.target_cols.iter().map(|&j| row[d * (self.k - 1) + j]).collect()
    }

    /// Departing-block response for the backward generator: X_{s-1}, read from
    /// the first block of embedded row s-1.
    fn backward_response(&self, s: usize) -> Vec<f64> {
        self.y.row(s - 1)[..self.base_dim].to_vec()
    }
}

/// Forward/backward generators trained on the first ell chunks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorPair {
    pub forward: FactorizedConditionalModel,
    pub backward: FactorizedConditionalModel,
    pub chunk_index: usize,
}

/// Fit generator pairs for ell = 1..L-1. Pair ell trains only on embedded
/// rows 0..ell*n.
pub fn fit_generators(
    prob: &EmbeddedProblem,
    config: &TestConfig,
    g: usize,
) -> Result<Vec<GeneratorPair>> {
    let (n, _) = chunk_indices(prob.y.len(), config.chunks)?;
    let ells: Vec<usize> = (1..config.chunks).collect();
    let results: Vec<Result<GeneratorPair>> = ells
        .par_iter()
        .map(|&ell| {
            fit_generator_pair(prob, config, g, ell, n)
                .map_err(|e| e.with_stage(&format!("generator chunk {ell}")))
        })
        .collect();
    results.into_iter().collect()
}

fn fit_generator_pair(
    prob: &EmbeddedProblem,
    config: &TestConfig,
    g: usize,
    ell: usize,
    n: usize,
) -> Result<GeneratorPair> {
    let limit = ell * n; // usable rows: 0..limit
    let d = prob.base_dim;

    // forward: predictor y[s], response = new block of y[s+1], s = 0..limit-1
    let fwd_idx: Vec<usize> = (0..limit - 1).collect();
    let x_fwd = prob.y.values.select_rows(&fwd_idx);
    let mut y_fwd = Mat::zeros(fwd_idx.len(), prob.target_cols.len());
    for (r, &s) in fwd_idx.iter().enumerate() {
        y_fwd.row_mut(r).copy_from_slice(&prob.forward_response(s + 1));
    }
    let mut fwd_rng = substream(config.seed, "fit-fwd", &[ell as u64]);
    let forward = FactorizedConditionalModel::fit(
        &x_fwd,
        &y_fwd,
        &prob.target_types,
        g,
        &config.mdn,
        &mut fwd_rng,
    )?;

    // backward: predictor y[s], response = X_{s-1}, s = 1..limit
    let bwd_idx: Vec<usize> = (1..limit).collect();
    let x_bwd = prob.y.values.select_rows(&bwd_idx);
    let mut y_bwd = Mat::zeros(bwd_idx.len(), d);
    for (r, &s) in bwd_idx.iter().enumerate() {
        y_bwd.row_mut(r).copy_from_slice(&prob.backward_response(s));
    }
    let base_types = &prob.y.column_types[..d];
    let mut bwd_rng = substream(config.seed, "fit-bwd", &[ell as u64]);
    let backward = FactorizedConditionalModel::fit(
        &x_bwd,
        &y_bwd,
        base_types,
        g,
        &config.mdn,
        &mut bwd_rng,
    )?;

    Ok(GeneratorPair { forward, backward, chunk_index: ell })
}

/// Monte Carlo CCF: draw M joint samples once, then average exp(i w.y) for
/// every frequency row.
pub fn ccf_mc(
    model: &FactorizedConditionalModel,
    x: &[f64],
    freqs: &Mat,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Complex64>> {
    if m == 0 {
        return Err(Error::Contract("ccf_mc: M must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(m);
    for _ in 0..m {
        samples.push(model.sample_joint(x, rng)?);
    }
    Ok(ccf_from_samples(&samples, freqs))
}

/// Average of exp(i w.y_m) over the sample rows, for each frequency row w.
pub fn ccf_from_samples(samples: &[Vec<f64>], freqs: &Mat) -> Vec<Complex64> {
    let m = samples.len() as f64;
    (0..freqs.rows())
        .map(|b| {
            let w = freqs.row(b);
            let mut acc = Complex64::new(0.0, 0.0);
            for s in samples {
                acc += Complex64::cis(dot(w, s));
            }
            acc / m
        })
        .collect()
}

/// Source of conditional characteristic function estimates, per chunk and
/// conditioning point. `s` is the 0-based embedded row index of the
/// conditioning point; `x` is that row.
pub trait CcfProvider: Sync {
    fn forward(&self, ell: usize, s: usize, x: &[f64], mu: &Mat) -> Vec<Complex64>;
    fn backward(&self, ell: usize, s: usize, x: &[f64], nu: &Mat) -> Vec<Complex64>;
}

/// CCF provider backed by fitted generators. Each conditioning point draws
/// its M samples once (from a substream keyed by chunk and index) and reuses
/// them across every frequency and lag.
pub struct GeneratorCcf<'a> {
    pub pairs: &'a [GeneratorPair],
    pub base_dim: usize,
    pub full_dim: usize,
    pub subset: bool,
    pub m_samples: usize,
    pub seed: u64,
}

impl CcfProvider for GeneratorCcf<'_> {
    fn forward(&self, ell: usize, s: usize, x: &[f64], mu: &Mat) -> Vec<Complex64> {
        let model = &self.pairs[ell - 1].forward;
        let mut rng = substream(self.seed, "ccf-fwd", &[ell as u64, s as u64]);
        let d = self.base_dim;
        let mut samples = Vec::with_capacity(self.m_samples);
        for _ in 0..self.m_samples {
            let block = model
                .sample_joint(x, &mut rng)
                .expect("sampling from a fitted generator cannot fail on finite input");
            if self.subset {
                samples.push(block);
            } else {
                // reconstruct the full next embedded row: shift off the oldest
                // block, append the sampled new block
                let mut v = Vec::with_capacity(self.full_dim);
                v.extend_from_slice(&x[d..]);
                v.extend_from_slice(&block);
                samples.push(v);
            }
        }
        ccf_from_samples(&samples, mu)
    }

    fn backward(&self, ell: usize, s: usize, x: &[f64], nu: &Mat) -> Vec<Complex64> {
        let model = &self.pairs[ell - 1].backward;
        let mut rng = substream(self.seed, "ccf-bwd", &[ell as u64, s as u64]);
        let d = self.base_dim;
        let mut samples = Vec::with_capacity(self.m_samples);
        for _ in 0..self.m_samples {
            let block = model
                .sample_joint(x, &mut rng)
                .expect("sampling from a fitted generator cannot fail on finite input");
            // previous embedded row: sampled departing block, then all but the
            // newest block of x
            let mut v = Vec::with_capacity(self.full_dim);
            v.extend_from_slice(&block);
            v.extend_from_slice(&x[..self.full_dim - d]);
            samples.push(v);
        }
        ccf_from_samples(&samples, nu)
    }
}

/// Stub CCF providers for oracle tests.
pub mod stubs {
    use super::*;

    /// Fixed complex constants regardless of the conditioning point.
    pub struct ConstantCcf {
        pub forward: Complex64,
        pub backward: Complex64,
    }

    impl CcfProvider for ConstantCcf {
        fn forward(&self, _: usize, _: usize, _: &[f64], mu: &Mat) -> Vec<Complex64> {
            vec![self.forward; mu.rows()]
        }
        fn backward(&self, _: usize, _: usize, _: &[f64], nu: &Mat) -> Vec<Complex64> {
            vec![self.backward; nu.rows()]
        }
    }

    type CcfFn = Box<dyn Fn(&[f64], &Mat) -> Vec<Complex64> + Sync + Send>;

    /// Arbitrary functions of the conditioning point and frequencies.
    pub struct FnCcf {
        pub forward: CcfFn,
        pub backward: CcfFn,
    }

    impl CcfProvider for FnCcf {
        fn forward(&self, _: usize, _: usize, x: &[f64], mu: &Mat) -> Vec<Complex64> {
            (self.forward)(x, mu)
        }
        fn backward(&self, _: usize, _: usize, x: &[f64], nu: &Mat) -> Vec<Complex64> {
            (self.backward)(x, nu)
        }
    }

    /// The exact CCF of an i.i.d. N(0, sd^2 I) series: E exp(i w.X) =
    /// exp(-sd^2 |w|^2 / 2), independent of the conditioning point.
    pub fn gaussian_iid(sd: f64) -> FnCcf {
        let phi = move |_x: &[f64], freqs: &Mat| -> Vec<Complex64> {
            (0..freqs.rows())
                .map(|b| {
                    let w = freqs.row(b);
                    let norm2: f64 = w.iter().map(|v| v * v).sum();
                    Complex64::new((-0.5 * sd * sd * norm2).exp(), 0.0)
                })
                .collect()
        };
        FnCcf { forward: Box::new(phi), backward: Box::new(phi) }
    }
}

/// Per-lag terms of the cross-fitted statistic: for each lag q, an N_q x B
/// complex array, rows indexed by (chunk, within-chunk time).
pub struct TermsTensor {
    pub q_min: usize,
    /// per_q[q - q_min]: row-major N_q x B.
    pub per_q: Vec<Vec<Complex64>>,
    pub b: usize,
    pub n: usize,
    pub chunks: usize,
    /// Effective length L*n after truncation.
    pub t_eff: usize,
    /// Marginal empirical characteristic function at each nu_b.
    pub marginal_ecf: Vec<Complex64>,
}

impl TermsTensor {
    pub fn n_q(&self, q: usize) -> usize {
        let by_chunks = (self.chunks - 1) * (self.n - q + 1);
        let by_total = self.t_eff - self.n - (q - 1) * (self.chunks - 1);
        debug_assert_eq!(by_chunks, by_total);
        by_chunks
    }

    pub fn q_max(&self) -> usize {
        self.q_min + self.per_q.len() - 1
    }

    pub fn terms(&self, q: usize) -> &[Complex64] {
        &self.per_q[q - self.q_min]
    }
}

/// Compute the per-(q, chunk, time, frequency) product terms of the
/// cross-fitted statistic.
pub fn statistic_terms(
    prob: &EmbeddedProblem,
    provider: &dyn CcfProvider,
    freqs: &FrequencySet,
    config: &TestConfig,
) -> Result<TermsTensor> {
    let t_raw = prob.y.len();
    let l = config.chunks;
    let q_max = config.max_lag;
    let (n, _) = chunk_indices(t_raw, l)?;
    let t_eff = l * n;
    let b = freqs.mu.rows();
    if freqs.nu.rows() != b {
        return Err(Error::Contract("mu/nu row count mismatch".into()));
    }
    if freqs.mu.cols() != prob.targets.cols() || freqs.nu.cols() != prob.full_dim() {
        return Err(Error::Contract("frequency dimension mismatch".into()));
    }

    // observed exponentials
    let e_target: Vec<Vec<Complex64>> = (0..t_eff)
        .map(|s| {
            let v = prob.targets.row(s);
            (0..b).map(|bi| Complex64::cis(dot(freqs.mu.row(bi), v))).collect()
        })
        .collect();
    let e_embed: Vec<Vec<Complex64>> = (0..t_eff)
        .map(|s| {
            let v = prob.y.row(s);
            (0..b).map(|bi| Complex64::cis(dot(freqs.nu.row(bi), v))).collect()
        })
        .collect();

    let mut marginal_ecf = vec![Complex64::new(0.0, 0.0); b];
    for row in &e_embed {
        for (acc, v) in marginal_ecf.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut marginal_ecf {
        *v /= t_eff as f64;
    }

    // CCF estimates at every conditioning index each chunk needs:
    // 0-based s in [ell*n, ell*n + n - 2] for both directions.
    let points: Vec<(usize, usize)> = (1..l)
        .flat_map(|ell| (ell * n..ell * n + n - 1).map(move |s| (ell, s)))
        .collect();
    let ccfs: Vec<(Vec<Complex64>, Vec<Complex64>)> = points
        .par_iter()
        .map(|&(ell, s)| {
            let x = prob.y.row(s);
            (
                provider.forward(ell, s, x, &freqs.mu),
                provider.backward(ell, s, x, &freqs.nu),
            )
        })
        .collect();
    let idx_of = |ell: usize, s: usize| -> usize { (ell - 1) * (n - 1) + (s - ell * n) };

    let per_q: Vec<Vec<Complex64>> = (2..=q_max)
        .into_par_iter()
        .map(|q| {
            let rows = (l - 1) * (n - q + 1);
            let mut out = vec![Complex64::new(0.0, 0.0); rows * b];
            let mut r = 0usize;
            for ell in 1..l {
                for t in 1..=(n - q + 1) {
                    // 1-based paper indices, shifted down by one for row access
                    let a0 = ell * n + t + q - 2; // X_{ln+t+q-1}
                    let c0 = ell * n + t + q - 3; // conditioning X_{ln+t+q-2}
                    let e0 = ell * n + t - 2; // X_{ln+t-1}
                    let f0 = ell * n + t - 1; // conditioning X_{ln+t}
                    let phi = &ccfs[idx_of(ell, c0)].0;
                    let psi = &ccfs[idx_of(ell, f0)].1;
                    let dst = &mut out[r * b..(r + 1) * b];
                    for bi in 0..b {
                        let first = e_target[a0][bi] - phi[bi];
                        let second = match config.variant {
                            StatVariant::DoublyRobust => e_embed[e0][bi] - psi[bi],
                            StatVariant::Plugin => e_embed[e0][bi] - marginal_ecf[bi],
                        };
                        let term = first * second;
                        debug_assert!(term.norm() <= 4.0 + 1e-9);
                        dst[bi] = term;
                    }
                    r += 1;
                }
            }
            out
        })
        .collect();

    Ok(TermsTensor { q_min: 2, per_q, b, n, chunks: l, t_eff, marginal_ecf })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Argmax {
    pub q: usize,
    pub b: usize,
    pub part: String,
}

pub struct Aggregated {
    pub s_hat: f64,
    /// 2B x (Q-1): rows 0..B scaled |real| parts, rows B..2B scaled |imag|.
    pub per_qb: Mat,
    pub argmax: Argmax,
}

/// Mean the terms over (chunk, time) per (q, b) and take the scaled max over
/// lag, frequency, and real/imaginary part.
pub fn aggregate_statistic(terms: &TermsTensor, _config: &TestConfig) -> Result<Aggregated> {
    if terms.per_q.is_empty() || terms.b == 0 {
        return Err(Error::Config("empty terms tensor".into()));
    }
    let b = terms.b;
    let q_count = terms.per_q.len();
    let mut per_qb = Mat::zeros(2 * b, q_count);
    let mut s_hat = -1.0;
    let mut argmax = Argmax { q: terms.q_min, b: 0, part: "real".into() };
    for (qi, data) in terms.per_q.iter().enumerate() {
        let q = terms.q_min + qi;
        let n_q = terms.n_q(q);
        let scale = (n_q as f64).sqrt();
        let rows = data.len() / b;
        for bi in 0..b {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..rows {
                acc += data[r * b + bi];
            }
            let mean = acc / rows as f64;
            let sr = scale * mean.re.abs();
            let si = scale * mean.im.abs();
            per_qb.set(bi, qi, sr);
            per_qb.set(b + bi, qi, si);
            if sr > s_hat {
                s_hat = sr;
                argmax = Argmax { q, b: bi, part: "real".into() };
            }
            if si > s_hat {
                s_hat = si;
                argmax = Argmax { q, b: bi, part: "imag".into() };
            }
        }
    }
    Ok(Aggregated { s_hat, per_qb, argmax })
}

/// Covariance of the stacked (real, imaginary) term vector for lag q: the
/// average of outer products over (chunk, time), not centered.
pub fn covariance_q(terms: &TermsTensor, q: usize) -> DMatrix<f64> {
    let b = terms.b;
    let data = terms.terms(q);
    let rows = data.len() / b;
    let dim = 2 * b;
    let mut sigma = DMatrix::<f64>::zeros(dim, dim);
    let mut v = vec![0.0; dim];
    for r in 0..rows {
        let row = &data[r * b..(r + 1) * b];
        for bi in 0..b {
            v[bi] = row[bi].re;
            v[b + bi] = row[bi].im;
        }
        for i in 0..dim {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for j in i..dim {
                sigma[(i, j)] += vi * v[j];
            }
        }
    }
    let scale = 1.0 / rows as f64;
    for i in 0..dim {
        for j in i..dim {
            let val = sigma[(i, j)] * scale;
            sigma[(i, j)] = val;
            sigma[(j, i)] = val;
        }
    }
    sigma
}

pub struct BootstrapOutcome {
    pub c_alpha: f64,
    pub maxima: Vec<f64>,
    /// Set when clipped negative eigenvalue mass exceeded 1e-6 of the trace.
    pub psd_warning: bool,
}

/// Multiplier bootstrap critical value: simulate max_q of the sup-norm of
/// Sigma_q^{1/2} Z_q and take the empirical quantile at `level`
/// (1 - alpha/2 by default).
pub fn bootstrap_critical(
    sigmas: &[DMatrix<f64>],
    alpha: f64,
    n_boot: usize,
    level_override: Option<f64>,
    seed: u64,
) -> Result<BootstrapOutcome> {
    if n_boot < 500 {
        return Err(Error::Config("n_boot must be >= 500".into()));
    }
    if sigmas.is_empty() {
        return Err(Error::Config("no covariance blocks".into()));
    }
    let mut psd_warning = false;
    let mut roots = Vec::with_capacity(sigmas.len());
    for sigma in sigmas {
        let dim = sigma.nrows();
        if sigma.ncols() != dim {
            return Err(Error::Contract("covariance block not square".into()));
        }
        let eig = sigma.clone().symmetric_eigen();
        let trace: f64 = eig.eigenvalues.iter().sum::<f64>().abs();
        let neg_mass: f64 = eig.eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
        if trace > 0.0 && neg_mass > 1e-6 * trace {
            psd_warning = true;
        }
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("eigendecomposition produced non-finite values".into()));
        }
        let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        // symmetric PSD square root: U diag(sqrt(lambda)) U^T
        let mut scaled = eig.eigenvectors.clone();
        for (c, s) in sqrt_vals.iter().enumerate() {
            let mut col = scaled.column_mut(c);
            col *= *s;
        }
        let root = &scaled * eig.eigenvectors.transpose();
        roots.push(root);
    }

    let maxima: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|rep| {
            let mut best = 0.0f64;
            for (qi, root) in roots.iter().enumerate() {
                let dim = root.nrows();
                let mut rng = substream(seed, "boot", &[qi as u64, rep as u64]);
                let z = DVector::<f64>::from_fn(dim, |_, _| {
                    rng.sample(rand_distr::StandardNormal)
                });
                let w = root * z;
                let sup = w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                best = best.max(sup);
            }
            best
        })
        .collect();

    let level = level_override.unwrap_or(1.0 - alpha / 2.0);
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config("quantile level must be in (0, 1)".into()));
    }
    let mut sorted = maxima.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((level * n_boot as f64).ceil() as usize).clamp(1, n_boot) - 1;
    Ok(BootstrapOutcome { c_alpha: sorted[idx], maxima, psd_warning })
}

/// Config echo embedded in reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ReportConfig {
    pub L: usize,
    pub B: usize,
    pub M: usize,
    pub Q: usize,
    pub n_boot: usize,
    pub seed: u64,
    pub variant: String,
    pub G: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub config: ReportConfig,
    pub argmax: Argmax,
    pub runtime_seconds: f64,
}

/// Run the Markov property test on the k-lag embedding of `series`.
/// Everything except `runtime_seconds` is a pure function of
/// (series, k, config).
pub fn run_test(series: &TimeSeries, k: usize, config: &TestConfig) -> Result<TestReport> {
    let start = Instant::now();
    let prob = EmbeddedProblem::new(series, k, config.test_dims.as_deref())
        .map_err(|e| e.with_stage("embed"))?;
    config.validate(prob.y.len()).map_err(|e| e.with_stage("config"))?;
    let (n, _) = chunk_indices(prob.y.len(), config.chunks)?;
    let discarded = prob.y.len() - config.chunks * n;
    if discarded > 0 {
        eprintln!("note: discarding {discarded} trailing rows (T not divisible by L)");
    }

    let g = match config.mixture_size {
        Some(g) => g,
        None => choose_g(&prob, config, n).map_err(|e| e.with_stage("select G"))?,
    };

    let pairs = fit_generators(&prob, config, g).map_err(|e| e.with_stage("fit generators"))?;
    let mut freq_rng = substream(config.seed, "freq", &[]);
    let freqs = sample_frequencies(
        config.freq_pairs,
        prob.targets.cols(),
        prob.full_dim(),
        &mut freq_rng,
    );
    let provider = GeneratorCcf {
        pairs: &pairs,
        base_dim: prob.base_dim,
        full_dim: prob.full_dim(),
        subset: prob.subset,
        m_samples: config.mc_samples,
        seed: config.seed,
    };
    let terms = statistic_terms(&prob, &provider, &freqs, config)
        .map_err(|e| e.with_stage("statistic terms"))?;
    let agg = aggregate_statistic(&terms, config).map_err(|e| e.with_stage("aggregate"))?;
    let sigmas: Vec<DMatrix<f64>> =
        (2..=config.max_lag).map(|q| covariance_q(&terms, q)).collect();
    let boot = bootstrap_critical(
        &sigmas,
        config.alpha,
        config.n_boot,
        config.quantile_level,
        config.seed,
    )
    .map_err(|e| e.with_stage("bootstrap"))?;
    if boot.psd_warning {
        eprintln!("warning: covariance had negative eigenvalue mass above 1e-6 of trace");
    }

    let exceed = boot.maxima.iter().filter(|v| **v >= agg.s_hat).count();
    let p_value = (2.0 * (exceed + 1) as f64 / (config.n_boot + 1) as f64).min(1.0);
    Ok(TestReport {
        statistic: agg.s_hat,
        critical_value: boot.c_alpha,
        p_value,
        reject: agg.s_hat > boot.c_alpha,
        alpha: config.alpha,
        config: ReportConfig {
            L: config.chunks,
            B: config.freq_pairs,
            M: config.mc_samples,
            Q: config.max_lag,
            n_boot: config.n_boot,
            seed: config.seed,
            variant: config.variant.to_string(),
            G: g,
        },
        argmax: agg.argmax,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Cross-validate G once on the first-chunk training slice (first continuous
/// forward component), reused for every chunk and both directions.
fn choose_g(prob: &EmbeddedProblem, config: &TestConfig, n: usize) -> Result<usize> {
    let cont = prob
        .target_types
        .iter()
        .position(|t| *t == ColumnType::Continuous);
    let Some(col) = cont else {
        return Ok(*config.g_grid.iter().min().unwrap_or(&1));
    };
    let idx: Vec<usize> = (0..n - 1).collect();
    let inputs = prob.y.values.select_rows(&idx);
    let targets: Vec<f64> = idx.iter().map(|&s| prob.forward_response(s + 1)[col]).collect();
    let mut rng = substream(config.seed, "select-g", &[]);
    select_g(&inputs, &targets, &config.g_grid, config.cv_folds, &config.mdn, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OrderEstimate {
    Order(usize),
    GreaterThan(usize),
}

impl Serialize for OrderEstimate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OrderEstimate::Order(k) => s.serialize_u64(*k as u64),
            OrderEstimate::GreaterThan(k) => s.serialize_str(&format!("> {k}")),
        }
    }
}

impl<'de> Deserialize<'de> for OrderEstimate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|k| OrderEstimate::Order(k as usize))
                .ok_or_else(|| D::Error::custom("invalid order")),
            serde_json::Value::String(s) => s
                .strip_prefix("> ")
                .and_then(|t| t.parse().ok())
                .map(OrderEstimate::GreaterThan)
                .ok_or_else(|| D::Error::custom("invalid order string")),
            _ => Err(D::Error::custom("invalid order estimate")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderReport {
    pub per_k: Vec<TestReport>,
    pub estimated_order: OrderEstimate,
}

/// Sequentially test k = 1, 2, ... and stop at the first non-rejection.
pub fn estimate_order(
    series: &TimeSeries,
    config: &TestConfig,
    k_max: usize,
) -> Result<OrderReport> {
    if k_max < 1 {
        return Err(Error::Config("k_max must be >= 1".into()));
    }
    let mut per_k = Vec::new();
    for k in 1..=k_max {
        let report = run_test(series, k, config).map_err(|e| e.with_stage(&format!("k={k}")))?;
        let reject = report.reject;
        per_k.push(report);
        if !reject {
            return Ok(OrderReport { per_k, estimated_order: OrderEstimate::Order(k) });
        }
    }
    Ok(OrderReport { per_k, estimated_order: OrderEstimate::GreaterThan(k_max) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::substream;
    use crate::sim::{paper_model, simulate, SimModel};

    #[test]
    fn chunk_examples() {
        let (n, ranges) = chunk_indices(9, 3).unwrap();
        assert_eq!(n, 3);
        assert_eq!(ranges, vec![0..3, 3..6, 6..9]);
        let (n, _) = chunk_indices(10, 3).unwrap();
        assert_eq!(n, 3); // row 10 discarded
        let (n, _) = chunk_indices(500, 3).unwrap();
        assert_eq!(n, 166);
        assert!(chunk_indices(2, 3).is_err());
    }

    #[test]
    fn frequency_sampling_deterministic_and_standard() {
        let a = sample_frequencies(10, 3, 3, &mut substream(1, "f", &[]));
        let b = sample_frequencies(10, 3, 3, &mut substream(1, "f", &[]));
        assert_eq!(a.mu, b.mu);
        assert_eq!(a.nu, b.nu);

        let big = sample_frequencies(10_000, 3, 3, &mut substream(2, "f", &[]));
        for j in 0..3 {
            let col: Vec<f64> = (0..big.mu.rows()).map(|i| big.mu.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 4.0 / (col.len() as f64).sqrt());
            assert!((var - 1.0).abs() < 0.1);
        }
        let one = sample_frequencies(1, 5, 2, &mut substream(3, "f", &[]));
        assert_eq!((one.mu.rows(), one.mu.cols()), (1, 5));
        assert_eq!((one.nu.rows(), one.nu.cols()), (1, 2));
    }

    #[test]
    fn ccf_zero_frequency_is_one() {
        let model = crate::mdn::fixed_diagonal_model(
            1,
            &[(vec![0.0], vec![0.7], vec![1.3])],
        );
        let freqs = Mat::zeros(3, 1);
        let est = ccf_mc(&model, &[0.0], &freqs, 50, &mut substream(1, "c", &[])).unwrap();
        for v in est {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn ccf_gaussian_analytic() {
        let model = crate::mdn::fixed_diagonal_model(
            1,
            &[(vec![0.0], vec![0.0], vec![1.0])],
        );
        let freqs = Mat::from_rows(&[vec![1.0]]);
        let m = 200_000;
        let est = ccf_mc(&model, &[0.0], &freqs, m, &mut substream(2, "c", &[])).unwrap();
        let expect = (-0.5f64).exp();
        assert!((est[0].re - expect).abs() < 3.0 / (m as f64).sqrt(), "{}", est[0].re);
        assert!(est[0].im.abs() < 3.0 / (m as f64).sqrt());
    }

    #[test]
    fn ccf_point_mass() {
        // near-degenerate at c: sigma just above the fixed-mixture floor
        let c = 1.25;
        let model = crate::mdn::fixed_diagonal_model(
            1,
            &[(vec![0.0], vec![c], vec![1e-8])],
        );
        let w = 0.8;
        let freqs = Mat::from_rows(&[vec![w]]);
        let est = ccf_mc(&model, &[0.0], &freqs, 100, &mut substream(3, "c", &[])).unwrap();
        let expect = Complex64::cis(w * c);
        assert!((est[0] - expect).norm() < 1e-6);
    }

    fn small_config() -> TestConfig {
        TestConfig {
            chunks: 2,
            freq_pairs: 2,
            max_lag: 3,
            mc_samples: 4,
            n_boot: 500,
            ..TestConfig::default()
        }
    }

    fn white_noise(t: usize, d: usize, seed: u64) -> TimeSeries {
        simulate(
            &SimModel::IidNoise { d, sd: 1.0 },
            t,
            0,
            &mut substream(seed, "wn", &[]),
        )
        .unwrap()
    }

    #[test]
    fn constant_series_stub_terms_are_one() {
        let mut m = Mat::zeros(30, 1);
        for v in m.data_mut() {
            *v = 0.0;
        }
        let series = TimeSeries::new(Mat::zeros(30, 1)).unwrap();
        let _ = m;
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = small_config();
        let freqs = sample_frequencies(2, 1, 1, &mut substream(1, "t", &[]));
        let provider = stubs::ConstantCcf {
            forward: Complex64::new(0.0, 0.0),
            backward: Complex64::new(0.0, 0.0),
        };
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
        for q in 2..=3 {
            for v in terms.terms(q) {
                assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn terms_match_brute_force_oracle() {
        // T=30, L=2, Q=3, B=2, constant stub CCFs
        let series = white_noise(30, 1, 5);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = small_config();
        let freqs = sample_frequencies(2, 1, 1, &mut substream(7, "bf", &[]));
        let cf = Complex64::new(0.3, -0.1);
        let cb = Complex64::new(-0.2, 0.4);
        let provider = stubs::ConstantCcf { forward: cf, backward: cb };
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();

        // independent double-loop re-implementation, 1-based indices as written
        let n = 15;
        let l = 2;
        for q in 2..=3usize {
            let mut row = 0usize;
            for ell in 1..l {
                for t in 1..=(n - q + 1) {
                    for bi in 0..2 {
                        let x_a = series.row(ell * n + t + q - 1 - 1)[0];
                        let x_e = series.row(ell * n + t - 1 - 1)[0];
                        let mu = freqs.mu.get(bi, 0);
                        let nu = freqs.nu.get(bi, 0);
                        let expect = (Complex64::cis(mu * x_a) - cf)
                            * (Complex64::cis(nu * x_e) - cb);
                        let got = terms.terms(q)[row * 2 + bi];
                        assert!((got - expect).norm() < 1e-12);
                    }
                    row += 1;
                }
            }
            assert_eq!(row * 2, terms.terms(q).len());
        }
    }

    #[test]
    fn term_modulus_bounded() {
        let series = white_noise(60, 2, 9);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { chunks: 3, freq_pairs: 4, max_lag: 4, ..small_config() };
        let freqs = sample_frequencies(4, 2, 2, &mut substream(8, "mb", &[]));
        let provider = stubs::ConstantCcf {
            forward: Complex64::new(0.9, 0.3),
            backward: Complex64::new(-0.5, -0.8),
        };
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
        for q in 2..=4 {
            assert!(terms.terms(q).iter().all(|v| v.norm() <= 4.0));
            // both N_q formulas agree (debug_assert inside n_q as well)
            assert_eq!(terms.n_q(q), (3 - 1) * (terms.n - q + 1));
        }
    }

    #[test]
    fn aggregate_hand_arithmetic() {
        // single q, single b, all terms 0.2 - 0.3i
        let n_q = 14; // l=2, n=15, q=2
        let terms = TermsTensor {
            q_min: 2,
            per_q: vec![vec![Complex64::new(0.2, -0.3); n_q]],
            b: 1,
            n: 15,
            chunks: 2,
            t_eff: 30,
            marginal_ecf: vec![Complex64::new(0.0, 0.0)],
        };
        let agg = aggregate_statistic(&terms, &small_config()).unwrap();
        let expect = (n_q as f64).sqrt() * 0.3;
        assert!((agg.s_hat - expect).abs() < 1e-12);
        assert_eq!(agg.argmax.part, "imag");

        let zero = TermsTensor {
            q_min: 2,
            per_q: vec![vec![Complex64::new(0.0, 0.0); n_q]],
            b: 1,
            n: 15,
            chunks: 2,
            t_eff: 30,
            marginal_ecf: vec![Complex64::new(0.0, 0.0)],
        };
        assert_eq!(aggregate_statistic(&zero, &small_config()).unwrap().s_hat, 0.0);
    }

    #[test]
    fn aggregate_permutation_invariant_in_b() {
        let series = white_noise(40, 1, 11);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { freq_pairs: 5, ..small_config() };
        let freqs = sample_frequencies(5, 1, 1, &mut substream(12, "p", &[]));
        let provider = stubs::ConstantCcf {
            forward: Complex64::new(0.1, 0.0),
            backward: Complex64::new(0.0, 0.2),
        };
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
        let s1 = aggregate_statistic(&terms, &config).unwrap().s_hat;

        let perm = [3usize, 0, 4, 1, 2];
        let mu2 = freqs.mu.select_rows(&perm);
        let nu2 = freqs.nu.select_rows(&perm);
        let terms2 = statistic_terms(
            &prob,
            &provider,
            &FrequencySet { mu: mu2, nu: nu2 },
            &config,
        )
        .unwrap();
        let s2 = aggregate_statistic(&terms2, &config).unwrap().s_hat;
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn covariance_rank_one_and_bounds() {
        let lam = [Complex64::new(0.5, -1.0), Complex64::new(-0.25, 2.0)];
        let terms = TermsTensor {
            q_min: 2,
            per_q: vec![lam.to_vec()],
            b: 2,
            n: 2,
            chunks: 2,
            t_eff: 4,
            marginal_ecf: vec![Complex64::new(0.0, 0.0); 2],
        };
        let sigma = covariance_q(&terms, 2);
        let v = [0.5, -0.25, -1.0, 2.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((sigma[(i, j)] - v[i] * v[j]).abs() < 1e-15);
            }
        }
        for i in 0..4 {
            assert!(sigma[(i, i)] <= 16.0);
        }
    }

    #[test]
    fn covariance_matches_naive_loops() {
        let series = white_noise(36, 1, 13);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { freq_pairs: 3, ..small_config() };
        let freqs = sample_frequencies(3, 1, 1, &mut substream(14, "cv", &[]));
        let provider = stubs::ConstantCcf {
            forward: Complex64::new(0.2, 0.1),
            backward: Complex64::new(-0.3, 0.05),
        };
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
        let q = 2;
        let sigma = covariance_q(&terms, q);
        let b = 3;
        let data = terms.terms(q);
        let rows = data.len() / b;
        for i in 0..2 * b {
            for j in 0..2 * b {
                let mut acc = 0.0;
                for r in 0..rows {
                    let vi = if i < b { data[r * b + i].re } else { data[r * b + i - b].im };
                    let vj = if j < b { data[r * b + j].re } else { data[r * b + j - b].im };
                    acc += vi * vj;
                }
                acc /= rows as f64;
                assert!((sigma[(i, j)] - acc).abs() < 1e-12);
                assert!((sigma[(i, j)] - sigma[(j, i)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bootstrap_identity_closed_form() {
        // max of two independent |N(0,1)|; P(max <= c) = (2 Phi(c) - 1)^2
        let sigma = DMatrix::<f64>::identity(2, 2);
        let out = bootstrap_critical(&[sigma], 0.05, 20_000, None, 77).unwrap();
        assert!((out.c_alpha - 2.494).abs() < 0.05, "c = {}", out.c_alpha);
        assert!(!out.psd_warning);
    }

    #[test]
    fn bootstrap_zero_sigma_and_monotonicity() {
        let zero = DMatrix::<f64>::zeros(4, 4);
        let out = bootstrap_critical(&[zero], 0.05, 500, None, 1).unwrap();
        assert_eq!(out.c_alpha, 0.0);

        let sigma = DMatrix::<f64>::identity(4, 4);
        let a = bootstrap_critical(&[sigma.clone()], 0.05, 1000, None, 2).unwrap();
        let b = bootstrap_critical(&[sigma], 0.10, 1000, None, 2).unwrap();
        assert!(b.c_alpha <= a.c_alpha);
    }

    #[test]
    fn oracle_null_property() {
        // iid Gaussian series with the true analytic CCFs substituted: the
        // per-(q,b) term means must be near zero (doubly robust estimating
        // equation at the truth).
        let t = 10_000 + 8;
        let series = white_noise(t, 1, 21);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig {
            chunks: 2,
            freq_pairs: 4,
            max_lag: 3,
            ..small_config()
        };
        let freqs = sample_frequencies(4, 1, 1, &mut substream(22, "on", &[]));
        let provider = stubs::gaussian_iid(1.0);
        let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
        let bound = 5.0 * (4.0 / (1.0e4f64).sqrt());
        for q in 2..=3 {
            let data = terms.terms(q);
            let rows = data.len() / 4;
            for bi in 0..4 {
                let mean: Complex64 =
                    (0..rows).map(|r| data[r * 4 + bi]).sum::<Complex64>() / rows as f64;
                assert!(mean.norm() <= bound, "q={q} b={bi}: |mean| = {}", mean.norm());
            }
        }
    }

    #[test]
    fn double_robustness_smoke() {
        // one side at the truth, the other an arbitrary bounded stub
        let t = 10_000 + 8;
        let series = white_noise(t, 1, 31);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { chunks: 2, freq_pairs: 3, max_lag: 3, ..small_config() };
        let freqs = sample_frequencies(3, 1, 1, &mut substream(32, "dr", &[]));
        let truth = |_: &[f64], f: &Mat| -> Vec<Complex64> {
            (0..f.rows())
                .map(|b| {
                    let w = f.row(b);
                    let n2: f64 = w.iter().map(|v| v * v).sum();
                    Complex64::new((-0.5 * n2).exp(), 0.0)
                })
                .collect()
        };
        let junk = |x: &[f64], f: &Mat| -> Vec<Complex64> {
            (0..f.rows())
                .map(|b| Complex64::cis(0.7 * x[0] + 0.1 * b as f64) * 0.5)
                .collect()
        };
        let bound = 5.0 * (4.0 / (1.0e4f64).sqrt());
        for flip in [false, true] {
            let provider = if flip {
                stubs::FnCcf { forward: Box::new(junk), backward: Box::new(truth) }
            } else {
                stubs::FnCcf { forward: Box::new(truth), backward: Box::new(junk) }
            };
            let terms = statistic_terms(&prob, &provider, &freqs, &config).unwrap();
            for q in 2..=3 {
                let data = terms.terms(q);
                let rows = data.len() / 3;
                for bi in 0..3 {
                    let mean: Complex64 =
                        (0..rows).map(|r| data[r * 3 + bi]).sum::<Complex64>() / rows as f64;
                    assert!(
                        mean.norm() <= bound,
                        "flip={flip} q={q} b={bi}: |mean| = {}",
                        mean.norm()
                    );
                }
            }
        }
    }

    #[test]
    fn cross_fitting_never_reads_later_rows() {
        // modifying rows beyond ell*n must not change generator pair ell
        let series = white_noise(90, 1, 41);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig {
            chunks: 3,
            mdn: TrainConfig { max_epochs: 40, ..TrainConfig::default() },
            ..small_config()
        };
        let pairs = fit_generators(&prob, &config, 1).unwrap();

        let mut other = series.clone();
        let n = 30;
        for t in n..series.len() {
            other.values.row_mut(t)[0] += 100.0;
        }
        let prob2 = EmbeddedProblem::new(&other, 1, None).unwrap();
        let pairs2 = fit_generators(&prob2, &config, 1).unwrap();
        // pair ell=1 trains on rows 0..n only
        let a = serde_json::to_string(&pairs[0]).unwrap();
        let b = serde_json::to_string(&pairs2[0]).unwrap();
        assert_eq!(a, b);
        // pair ell=2 saw the modified rows and must differ
        let c = serde_json::to_string(&pairs[1]).unwrap();
        let d = serde_json::to_string(&pairs2[1]).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn generator_fit_shapes_and_ar1_mean_shift() {
        let model = SimModel::Ar1 { a: 0.5, noise_sd: 1.0 };
        let series = simulate(&model, 400, 200, &mut substream(43, "g", &[])).unwrap();
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { chunks: 2, ..TestConfig::default() };
        let pairs = fit_generators(&prob, &config, 1).unwrap();
        assert_eq!(pairs.len(), 1);
        let fwd = &pairs[0].forward;
        // conditional mean at x vs x+1 shifts by about the AR coefficient
        let m0 = match &fwd.components[0] {
            crate::mdn::ComponentModel::Continuous(m) => m,
            _ => panic!("expected continuous"),
        };
        let a = m0.moments(&[0.0]).unwrap().0;
        let b = m0.moments(&[1.0]).unwrap().0;
        assert!((b - a - 0.5).abs() < 0.15, "mean shift {}", b - a);
    }

    #[test]
    fn white_noise_generator_is_flat() {
        let series = white_noise(400, 1, 44);
        let prob = EmbeddedProblem::new(&series, 1, None).unwrap();
        let config = TestConfig { chunks: 2, ..TestConfig::default() };
        let pairs = fit_generators(&prob, &config, 1).unwrap();
        let m0 = match &pairs[0].forward.components[0] {
            crate::mdn::ComponentModel::Continuous(m) => m,
            _ => panic!("expected continuous"),
        };
        let means: Vec<f64> = (-2..=2)
            .map(|i| m0.moments(&[i as f64]).unwrap().0)
            .collect();
        let spread = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - means.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.25, "conditional mean spread {spread}");
    }

    #[test]
    fn run_test_deterministic_per_seed() {
        let series = white_noise(120, 1, 51);
        let config = TestConfig {
            chunks: 2,
            freq_pairs: 8,
            mc_samples: 10,
            max_lag: 3,
            n_boot: 500,
            mixture_size: Some(1),
            mdn: TrainConfig { max_epochs: 30, ..TrainConfig::default() },
            seed: 9,
            ..TestConfig::default()
        };
        let mut a = run_test(&series, 1, &config).unwrap();
        let mut b = run_test(&series, 1, &config).unwrap();
        a.runtime_seconds = 0.0;
        b.runtime_seconds = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn estimate_order_flags_consistent() {
        let m = paper_model(1, false).unwrap();
        let series = simulate(&m, 240, 200, &mut substream(53, "eo", &[])).unwrap();
        let config = TestConfig {
            chunks: 2,
            freq_pairs: 10,
            mc_samples: 10,
            max_lag: 3,
            n_boot: 500,
            mixture_size: Some(1),
            mdn: TrainConfig { max_epochs: 30, ..TrainConfig::default() },
            seed: 3,
            ..TestConfig::default()
        };
        let report = estimate_order(&series, &config, 2).unwrap();
        match report.estimated_order {
            OrderEstimate::Order(k) => {
                assert_eq!(report.per_k.len(), k);
                assert!(!report.per_k.last().unwrap().reject);
                for r in &report.per_k[..k - 1] {
                    assert!(r.reject);
                }
            }
            OrderEstimate::GreaterThan(km) => {
                assert_eq!(km, 2);
                assert!(report.per_k.iter().all(|r| r.reject));
            }
        }
    }
}
