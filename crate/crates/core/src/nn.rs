//! Feed-forward trunk with three parallel mixture heads.
//!
//! The network maps an input vector through ReLU hidden layers and a linear
//! trunk layer to a G-dimensional feature vector, then through three parallel
//! G x G linear heads producing the mixture weights (softmax), component means
//! (identity), and component standard deviations (softplus plus a floor).
//! Gradients of the mixture negative log-likelihood are computed analytically
//! by backpropagation; a central finite-difference oracle is provided for
//! verification.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{affine, Mat};

pub const LN_2PI: f64 = 1.837877066409345_f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// out x in weight matrix.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense { w: Mat::zeros(out, inp), b: vec![0.0; out] }
    }

    fn he_uniform(out: usize, inp: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = scale * (6.0 / inp as f64).sqrt();
        let mut w = Mat::zeros(out, inp);
        for v in w.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Dense { w, b: vec![0.0; out] }
    }

    fn out_dim(&self) -> usize {
        self.w.rows()
    }

    fn in_dim(&self) -> usize {
        self.w.cols()
    }
}

/// All trainable parameters of one univariate mixture head network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub input_dim: usize,
    pub hidden: Vec<Dense>,
    /// Linear map from the last hidden layer to the G-dimensional trunk output.
    pub trunk_out: Dense,
    pub head_alpha: Dense,
    pub head_mu: Dense,
    pub head_sigma: Dense,
    pub g: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Mat, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Contract("batch must be nonempty".into()));
        }
        if inputs.rows() != targets.len() {
            return Err(Error::Contract(format!(
                "batch rows {} != targets {}",
                inputs.rows(),
                targets.len()
            )));
        }
        if !inputs.is_finite() || !targets.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("batch contains non-finite entries".into()));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-sample forward pass cache used by backpropagation.
struct Trace {
    /// Post-activation of each hidden layer (input excluded).
    hidden_post: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    trunk: Vec<f64>,
    zs: Vec<f64>,
    alpha: Vec<f64>,
    log_alpha: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl NetworkParams {
    /// Seeded initialization: He-uniform trunk, head weights scaled by 0.1,
    /// all biases zero.
    pub fn init(input_dim: usize, hidden_sizes: &[usize], g: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(input_dim >= 1 && g >= 1);
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut prev = input_dim;
        for &u in hidden_sizes {
            hidden.push(Dense::he_uniform(u, prev, 1.0, rng));
            prev = u;
        }
        let trunk_out = Dense::he_uniform(g, prev, 1.0, rng);
        NetworkParams {
            input_dim,
            hidden,
            trunk_out,
            head_alpha: Dense::he_uniform(g, g, 0.1, rng),
            head_mu: Dense::he_uniform(g, g, 0.1, rng),
            head_sigma: Dense::he_uniform(g, g, 0.1, rng),
            g,
        }
    }

    /// All-zero parameters with the same shape conventions as `init`.
    pub fn zeros(input_dim: usize, hidden_sizes: &[usize], g: usize) -> Self {
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut prev = input_dim;
        for &u in hidden_sizes {
            hidden.push(Dense::zeros(u, prev));
            prev = u;
        }
        NetworkParams {
            input_dim,
            hidden,
            trunk_out: Dense::zeros(g, prev),
            head_alpha: Dense::zeros(g, g),
            head_mu: Dense::zeros(g, g),
            head_sigma: Dense::zeros(g, g),
            g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim;
        for (i, l) in self.hidden.iter().enumerate() {
            if l.in_dim() != prev {
                return Err(Error::Contract(format!(
                    "hidden layer {i}: expected input {prev}, got {}",
                    l.in_dim()
                )));
            }
            prev = l.out_dim();
        }
        if self.trunk_out.in_dim() != prev || self.trunk_out.out_dim() != self.g {
            return Err(Error::Contract("trunk output layer shape mismatch".into()));
        }
        for (name, h) in [
            ("alpha", &self.head_alpha),
            ("mu", &self.head_mu),
            ("sigma", &self.head_sigma),
        ] {
            if h.in_dim() != self.g || h.out_dim() != self.g {
                return Err(Error::Contract(format!("head {name} must be {0}x{0}", self.g)));
            }
        }
        let finite = self
            .hidden
            .iter()
            .chain([&self.trunk_out, &self.head_alpha, &self.head_mu, &self.head_sigma])
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }

    fn layers(&self) -> Vec<&Dense> {
        let mut v: Vec<&Dense> = self.hidden.iter().collect();
        v.push(&self.trunk_out);
        v.push(&self.head_alpha);
        v.push(&self.head_mu);
        v.push(&self.head_sigma);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut v: Vec<&mut Dense> = self.hidden.iter_mut().collect();
        v.push(&mut self.trunk_out);
        v.push(&mut self.head_alpha);
        v.push(&mut self.head_mu);
        v.push(&mut self.head_sigma);
        v
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn from_flat(shape: &NetworkParams, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::Contract(format!(
                "flat length {} != parameter count {}",
                flat.len(),
                shape.param_count()
            )));
        }
        let mut out = shape.clone();
        let mut pos = 0;
        for l in out.layers_mut() {
            let wn = l.w.rows() * l.w.cols();
            l.w.data_mut().copy_from_slice(&flat[pos..pos + wn]);
            pos += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[pos..pos + bn]);
            pos += bn;
        }
        Ok(out)
    }

    fn trace(&self, x: &[f64], sigma_floor: f64) -> Trace {
        let mut cur = x.to_vec();
        let mut hidden_pre = Vec::with_capacity(self.hidden.len());
        let mut hidden_post = Vec::with_capacity(self.hidden.len());
        for l in &self.hidden {
            let mut pre = vec![0.0; l.out_dim()];
            affine(&l.w, &l.b, &cur, &mut pre);
            let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            hidden_pre.push(pre);
            cur = post.clone();
            hidden_post.push(post);
        }
        let mut trunk = vec![0.0; self.g];
        affine(&self.trunk_out.w, &self.trunk_out.b, &cur, &mut trunk);
        let mut za = vec![0.0; self.g];
        let mut zm = vec![0.0; self.g];
        let mut zs = vec![0.0; self.g];
        affine(&self.head_alpha.w, &self.head_alpha.b, &trunk, &mut za);
        affine(&self.head_mu.w, &self.head_mu.b, &trunk, &mut zm);
        affine(&self.head_sigma.w, &self.head_sigma.b, &trunk, &mut zs);
        let lse = log_sum_exp(&za);
        let log_alpha: Vec<f64> = za.iter().map(|v| v - lse).collect();
        let alpha: Vec<f64> = log_alpha.iter().map(|v| v.exp()).collect();
        let sigma: Vec<f64> = zs.iter().map(|&v| softplus(v) + sigma_floor).collect();
        Trace { hidden_post, hidden_pre, trunk, zs, alpha, log_alpha, mu: zm, sigma }
    }
}

/// Evaluate the three heads at one input point.
pub fn forward_heads(net: &NetworkParams, x: &[f64], sigma_floor: f64) -> Result<HeadOutputs> {
    net.validate()?;
    if x.len() != net.input_dim {
        return Err(Error::Contract(format!(
            "input length {} != input_dim {}",
            x.len(),
            net.input_dim
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite input".into()));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::Contract("sigma_floor must be positive".into()));
    }
    let t = net.trace(x, sigma_floor);
    Ok(HeadOutputs { alpha: t.alpha, mu: t.mu, sigma: t.sigma })
}

/// Per-sample mixture log-likelihood at standardized (x, y).
fn sample_log_lik(t: &Trace, y: f64) -> (f64, Vec<f64>) {
    let g = t.alpha.len();
    let mut comp = vec![0.0; g];
    for j in 0..g {
        let z = (y - t.mu[j]) / t.sigma[j];
        comp[j] = t.log_alpha[j] - 0.5 * LN_2PI - t.sigma[j].ln() - 0.5 * z * z;
    }
    (log_sum_exp(&comp), comp)
}

/// Forward-only mean negative log-likelihood.
pub fn nll(net: &NetworkParams, batch: &Batch, sigma_floor: f64) -> Result<f64> {
    net.validate()?;
    if batch.inputs.cols() != net.input_dim {
        return Err(Error::Contract("batch input width mismatch".into()));
    }
    let n = batch.len();
    let mut loss = 0.0;
    for i in 0..n {
        let t = net.trace(batch.inputs.row(i), sigma_floor);
        let (ll, _) = sample_log_lik(&t, batch.targets[i]);
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-likelihood at row {i}")));
        }
        loss -= ll;
    }
    Ok(loss / n as f64)
}

/// Mean negative log-likelihood and its exact gradient by backpropagation.
pub fn nll_and_grad(
    net: &NetworkParams,
    batch: &Batch,
    sigma_floor: f64,
) -> Result<(f64, NetworkParams)> {
    net.validate()?;
    if batch.inputs.cols() != net.input_dim {
        return Err(Error::Contract("batch input width mismatch".into()));
    }
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut grads = NetworkParams::zeros(
        net.input_dim,
        &net.hidden.iter().map(|l| l.out_dim()).collect::<Vec<_>>(),
        net.g,
    );
    let mut loss = 0.0;
    let g = net.g;

    for i in 0..n {
        let x = batch.inputs.row(i);
        let y = batch.targets[i];
        let t = net.trace(x, sigma_floor);
        let (ll, comp) = sample_log_lik(&t, y);
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("non-finite log-likelihood at row {i}")));
        }
        loss -= ll * scale;

        // Responsibilities and head-level gradients of -log f.
        let resp: Vec<f64> = comp.iter().map(|c| (c - ll).exp()).collect();
        let mut dza = vec![0.0; g];
        let mut dzm = vec![0.0; g];
        let mut dzs = vec![0.0; g];
        for j in 0..g {
            dza[j] = (t.alpha[j] - resp[j]) * scale;
            let diff = y - t.mu[j];
            let s = t.sigma[j];
            dzm[j] = -resp[j] * diff / (s * s) * scale;
            let dsigma = resp[j] * (1.0 / s - diff * diff / (s * s * s)) * scale;
            dzs[j] = dsigma * sigmoid(t.zs[j]);
        }

        // Heads: accumulate weight/bias gradients and propagate to the trunk.
        let mut dtrunk = vec![0.0; g];
        for (head, ghead, dz) in [
            (&net.head_alpha, &mut grads.head_alpha, &dza),
            (&net.head_mu, &mut grads.head_mu, &dzm),
            (&net.head_sigma, &mut grads.head_sigma, &dzs),
        ] {
            for r in 0..g {
                let gw = ghead.w.row_mut(r);
                for c in 0..g {
                    gw[c] += dz[r] * t.trunk[c];
                }
                ghead.b[r] += dz[r];
            }
            for c in 0..g {
                let mut acc = 0.0;
                for r in 0..g {
                    acc += head.w.get(r, c) * dz[r];
                }
                dtrunk[c] += acc;
            }
        }

        // Trunk linear layer.
        let last_hidden: &[f64] =
            if net.hidden.is_empty() { x } else { &t.hidden_post[net.hidden.len() - 1] };
        let mut dcur = vec![0.0; last_hidden.len()];
        for r in 0..g {
            let gw = grads.trunk_out.w.row_mut(r);
            for c in 0..last_hidden.len() {
                gw[c] += dtrunk[r] * last_hidden[c];
            }
            grads.trunk_out.b[r] += dtrunk[r];
        }
        for c in 0..last_hidden.len() {
            let mut acc = 0.0;
            for r in 0..g {
                acc += net.trunk_out.w.get(r, c) * dtrunk[r];
            }
            dcur[c] = acc;
        }

        // Hidden ReLU layers, back to front.
        for li in (0..net.hidden.len()).rev() {
            let pre = &t.hidden_pre[li];
            let below: &[f64] = if li == 0 { x } else { &t.hidden_post[li - 1] };
            let mut da = dcur.clone();
            for (v, &p) in da.iter_mut().zip(pre.iter()) {
                if p <= 0.0 {
                    *v = 0.0;
                }
            }
            let layer = &net.hidden[li];
            let glayer = &mut grads.hidden[li];
            for r in 0..da.len() {
                let gw = glayer.w.row_mut(r);
                for c in 0..below.len() {
                    gw[c] += da[r] * below[c];
                }
                glayer.b[r] += da[r];
            }
            let mut dbelow = vec![0.0; below.len()];
            for c in 0..below.len() {
                let mut acc = 0.0;
                for r in 0..da.len() {
                    acc += layer.w.get(r, c) * da[r];
                }
                dbelow[c] = acc;
            }
            dcur = dbelow;
        }
    }
    Ok((loss, grads))
}

/// One Adam update with bias correction. Returns the new state and parameters.
pub fn adam_step(
    state: &AdamState,
    net: &NetworkParams,
    grads: &NetworkParams,
) -> Result<(AdamState, NetworkParams)> {
    let theta = net.to_flat();
    let g = grads.to_flat();
    if theta.len() != g.len() || theta.len() != state.first_moment.len() {
        return Err(Error::Contract("adam_step: shape mismatch".into()));
    }
    let mut st = state.clone();
    st.step_count += 1;
    let t = st.step_count as f64;
    let bc1 = 1.0 - st.beta1.powf(t);
    let bc2 = 1.0 - st.beta2.powf(t);
    let mut out = theta;
    for i in 0..out.len() {
        st.first_moment[i] = st.beta1 * st.first_moment[i] + (1.0 - st.beta1) * g[i];
        st.second_moment[i] = st.beta2 * st.second_moment[i] + (1.0 - st.beta2) * g[i] * g[i];
        let m_hat = st.first_moment[i] / bc1;
        let v_hat = st.second_moment[i] / bc2;
        out[i] -= st.learning_rate * m_hat / (v_hat.sqrt() + st.epsilon);
    }
    Ok((st, NetworkParams::from_flat(net, &out)?))
}

/// Central finite-difference gradient of the mean NLL, parameter by parameter.
pub fn finite_diff_grad(
    net: &NetworkParams,
    batch: &Batch,
    sigma_floor: f64,
    h: f64,
) -> Result<NetworkParams> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract("finite difference step h must be in [1e-7, 1e-3]".into()));
    }
    let base = net.to_flat();
    let mut grad = vec![0.0; base.len()];
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + h;
        let up = nll(&NetworkParams::from_flat(net, &work)?, batch, sigma_floor)?;
        work[i] = base[i] - h;
        let dn = nll(&NetworkParams::from_flat(net, &work)?, batch, sigma_floor)?;
        work[i] = base[i];
        grad[i] = (up - dn) / (2.0 * h);
    }
    NetworkParams::from_flat(net, &grad)
}
