//! Ground-truth testbeds.
//!
//! * [`linear_gaussian_case`]: AR(1)-correlated Gaussian design with a sparse
//!   linear response and known support.
//! * Critical-path networks: small rectifier MLPs whose output depends only
//!   on designed per-layer critical sets. A latent mechanism variable drives
//!   the input distribution; the "routed" network (prior-knowledge analog)
//!   keeps each mechanism on its own critical subpath, while the "shared"
//!   network (conventionally-trained analog) only preserves the coarse
//!   posterior label. Non-critical neurons are decoys: independent noise plus
//!   weak class-correlated drive, with zero weight into any critical neuron.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, std_normal};
use crate::trace::{ActivationTrace, LayerMatrix};

/// Mean of an active mechanism's own input features.
pub const MECHANISM_AMPLITUDE: f64 = 4.0;
pub const INPUT_NOISE_SD: f64 = 1.0;
/// Scale of the class-correlated component of decoy neurons.
pub const DECOY_LOADING: f64 = 0.3;
const CRITICAL_BIAS: f64 = -0.5;
const DECOY_BIAS: f64 = 1.0;

// stream ids for seed derivation
const S_CRITICAL: u64 = 1;
const S_INPUT: u64 = 2;
const S_DECOY: u64 = 3;
const S_ROUTE: u64 = 4;
const S_OUTPUT: u64 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianCase {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub support: Vec<usize>,
    pub beta: Vec<f64>,
    pub noise_sd: f64,
}

/// Rows of `x` are stationary AR(1) with unit variance and lag-one
/// correlation `rho`; `y = x beta + N(0, 1)` with `beta = +-amplitude` on a
/// uniformly drawn support of the given size.
pub fn linear_gaussian_case(
    p: usize,
    support_size: usize,
    amplitude: f64,
    rho: f64,
    n: usize,
    seed: u64,
) -> Result<LinearGaussianCase> {
    if support_size > p {
        return Err(Error::InvalidInput(format!("support {support_size} exceeds p = {p}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho = {rho} outside [0, 1)")));
    }
    let mut r = rng::stream(seed, &[0]);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.shuffle(&mut r);
    let mut support = idx[..support_size].to_vec();
    support.sort_unstable();
    let mut beta = vec![0.0; p];
    for &j in &support {
        beta[j] = if r.random::<bool>() { amplitude } else { -amplitude };
    }
    let innov = (1.0 - rho * rho).sqrt();
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut prev = 0.0;
        let mut acc = 0.0;
        for j in 0..p {
            let v = if j == 0 {
                std_normal(&mut r)
            } else {
                rho * prev + innov * std_normal(&mut r)
            };
            x[(i, j)] = v;
            acc += beta[j] * v;
            prev = v;
        }
        y.push(acc + std_normal(&mut r));
    }
    if amplitude == 0.0 {
        support.clear();
    }
    Ok(LinearGaussianCase {
        x,
        y,
        support,
        beta,
        noise_sd: 1.0,
    })
}

/// How critical neurons carry the latent mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Each mechanism keeps its own dominant critical neurons at every layer.
    Routed,
    /// Hidden critical neurons pool all mechanisms of a posterior class
    /// symmetrically, so only the posterior label survives.
    Shared,
}

/// Dominant neurons of one latent mechanism, per non-output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismRoute {
    pub latent: usize,
    pub posterior: usize,
    pub dominant: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Input first, output (logits) last.
    pub layer_widths: Vec<usize>,
    /// `weights[l]` maps layer `l` to `l + 1` (`widths[l+1] x widths[l]`).
    #[serde(with = "matrix_list")]
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Designed critical neurons per layer; the output layer is fully critical.
    pub critical_sets: Vec<Vec<usize>>,
    pub k_true: usize,
    pub routing: Routing,
    pub mechanism_map: Vec<MechanismRoute>,
    /// Input mean per latent mechanism (`k_true` rows of input width).
    pub input_means: Vec<Vec<f64>>,
    pub input_noise_sd: f64,
    /// Output neuron whose logit is the response.
    pub class_of_interest: usize,
    pub seed: u64,
}

mod matrix_list {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "crate::io::matrix_rows")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|m| Wrapped(m.clone())).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

impl SyntheticSpec {
    pub fn layer_count(&self) -> usize {
        self.layer_widths.len()
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// `input`, `hidden1`, ..., `output`.
    pub fn layer_id(&self, l: usize) -> String {
        if l == 0 {
            "input".into()
        } else if l + 1 == self.layer_count() {
            "output".into()
        } else {
            format!("hidden{l}")
        }
    }

    pub fn layer_index(&self, id: &str) -> Result<usize> {
        (0..self.layer_count())
            .find(|&l| self.layer_id(l) == id)
            .ok_or_else(|| Error::Config(format!("unknown layer id '{id}'")))
    }

    pub fn hidden_layer_ids(&self) -> Vec<String> {
        (1..self.layer_count() - 1).map(|l| self.layer_id(l)).collect()
    }

    /// Posterior class of each latent mechanism.
    pub fn posterior_of(&self, latent: usize) -> usize {
        self.mechanism_map[latent].posterior
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layer_count();
        if self.weights.len() != l - 1 || self.biases.len() != l - 1 {
            return Err(Error::Data("weights/biases do not match layer count".into()));
        }
        for (i, w) in self.weights.iter().enumerate() {
            if w.shape() != (self.layer_widths[i + 1], self.layer_widths[i])
                || self.biases[i].len() != self.layer_widths[i + 1]
            {
                return Err(Error::Data(format!("layer {i} parameter shape mismatch")));
            }
        }
        if self.input_means.len() != self.k_true
            || self.input_means.iter().any(|m| m.len() != self.layer_widths[0])
        {
            return Err(Error::Data("input means do not match k_true x input width".into()));
        }
        Ok(())
    }
}

fn latent_to_posterior(k_true: usize, n_out: usize) -> Vec<usize> {
    (0..k_true).map(|m| m * n_out / k_true).collect()
}

fn check_shape(layer_widths: &[usize], critical_widths: &[usize], k_true: usize) -> Result<()> {
    if layer_widths.len() < 2 {
        return Err(Error::Config(
            "layer_widths needs at least an input and an output layer".into(),
        ));
    }
    if let Some(pos) = layer_widths.iter().position(|&w| w == 0) {
        return Err(Error::Config(format!("layer_widths[{pos}] must be positive")));
    }
    if critical_widths.len() != layer_widths.len() - 1 {
        return Err(Error::Config(format!(
            "critical_widths needs {} entries (one per non-output layer), got {}",
            layer_widths.len() - 1,
            critical_widths.len()
        )));
    }
    if k_true == 0 {
        return Err(Error::Config("k_true must be >= 1".into()));
    }
    for (l, (&c, &w)) in critical_widths.iter().zip(layer_widths).enumerate() {
        if c > w {
            return Err(Error::Config(format!(
                "critical_widths[{l}] = {c} exceeds layer_widths[{l}] = {w}"
            )));
        }
        if c < k_true {
            return Err(Error::Config(format!(
                "capacity violation: critical_widths[{l}] = {c} < k_true = {k_true}"
            )));
        }
    }
    Ok(())
}

/// Random critical index set per layer (sorted), shared by both routings.
fn critical_sets(layer_widths: &[usize], critical_widths: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = critical_widths
        .iter()
        .zip(layer_widths)
        .enumerate()
        .map(|(l, (&c, &w))| {
            let mut idx: Vec<usize> = (0..w).collect();
            idx.shuffle(&mut rng::stream(seed, &[S_CRITICAL, l as u64]));
            let mut set = idx[..c].to_vec();
            set.sort_unstable();
            set
        })
        .collect();
    sets.push((0..*layer_widths.last().unwrap()).collect());
    sets
}

/// Owner mechanism of the `pos`-th critical neuron among `count`.
fn owner(pos: usize, count: usize, k_true: usize) -> usize {
    pos * k_true / count
}

fn build(
    layer_widths: &[usize],
    critical_widths: &[usize],
    k_true: usize,
    seed: u64,
    routing: Routing,
) -> Result<SyntheticSpec> {
    check_shape(layer_widths, critical_widths, k_true)?;
    let n_layers = layer_widths.len();
    let n_out = layer_widths[n_layers - 1];
    let posterior = latent_to_posterior(k_true, n_out);
    let crit = critical_sets(layer_widths, critical_widths, seed);
    let is_crit: Vec<Vec<bool>> = crit
        .iter()
        .zip(layer_widths)
        .map(|(set, &w)| {
            let mut mask = vec![false; w];
            set.iter().for_each(|&i| mask[i] = true);
            mask
        })
        .collect();
    let decoys =
        |l: usize| -> Vec<usize> { (0..layer_widths[l]).filter(|&i| !is_crit[l][i]).collect() };
    // owner mechanism / posterior group of each critical position
    let owner_at = |l: usize, pos: usize| owner(pos, crit[l].len(), k_true);
    let group_of_critical = |l: usize, pos: usize| -> usize {
        match routing {
            Routing::Routed => posterior[owner_at(l, pos)],
            Routing::Shared if l == 0 => posterior[owner_at(l, pos)],
            Routing::Shared => pos * n_out / crit[l].len(),
        }
    };

    // inputs: mechanism block on critical features, class loading on decoys
    let mut r_in = rng::stream(seed, &[S_INPUT]);
    let decoy_class_dir: Vec<Vec<f64>> = decoys(0)
        .iter()
        .map(|_| (0..n_out).map(|_| std_normal(&mut r_in)).collect())
        .collect();
    let input_means: Vec<Vec<f64>> = (0..k_true)
        .map(|m| {
            let mut mean = vec![0.0; layer_widths[0]];
            for (pos, &i) in crit[0].iter().enumerate() {
                if owner_at(0, pos) == m {
                    mean[i] = MECHANISM_AMPLITUDE;
                }
            }
            for (d, &i) in decoys(0).iter().enumerate() {
                mean[i] = DECOY_LOADING * decoy_class_dir[d][posterior[m]];
            }
            mean
        })
        .collect();

    let mut weights = Vec::with_capacity(n_layers - 1);
    let mut biases = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers - 1 {
        let (src_w, dst_w) = (layer_widths[l], layer_widths[l + 1]);
        let mut w = DMatrix::zeros(dst_w, src_w);
        let mut b = vec![0.0; dst_w];
        let output = l + 1 == n_layers - 1;
        let mut r_route = rng::stream(seed, &[S_ROUTE, l as u64]);
        let mut r_out = rng::stream(seed, &[S_OUTPUT, l as u64]);

        if output {
            // logit_g = sum_t v_t z_t (+1 if t's group is g, else -1/(n_out-1))
            for (pos, &s) in crit[l].iter().enumerate() {
                let v = r_out.random_range(0.5..1.5);
                let g = group_of_critical(l, pos);
                for out in 0..dst_w {
                    w[(out, s)] = if out == g {
                        v
                    } else if n_out > 1 {
                        -v / (n_out - 1) as f64
                    } else {
                        0.0
                    };
                }
            }
        } else {
            let src_crit = &crit[l];
            for (tpos, &t) in crit[l + 1].iter().enumerate() {
                b[t] = CRITICAL_BIAS;
                let sources: Vec<usize> = match (routing, l) {
                    (Routing::Routed, _) => {
                        let m = owner_at(l + 1, tpos);
                        (0..src_crit.len()).filter(|&sp| owner_at(l, sp) == m).collect()
                    }
                    (Routing::Shared, 0) => {
                        // one feature from every mechanism of the target's group
                        let g = group_of_critical(l + 1, tpos);
                        (0..k_true)
                            .filter(|&m| posterior[m] == g)
                            .map(|m| {
                                let owned: Vec<usize> =
                                    (0..src_crit.len()).filter(|&sp| owner_at(l, sp) == m).collect();
                                owned[tpos % owned.len()]
                            })
                            .collect()
                    }
                    (Routing::Shared, _) => {
                        let g = group_of_critical(l + 1, tpos);
                        (0..src_crit.len())
                            .filter(|&sp| group_of_critical(l, sp) == g)
                            .collect()
                    }
                };
                if sources.is_empty() {
                    continue;
                }
                match (routing, l) {
                    (Routing::Shared, 0) => {
                        let v = r_route.random_range(0.5..1.5);
                        for sp in sources {
                            w[(t, src_crit[sp])] = v;
                        }
                    }
                    _ => {
                        let raw: Vec<f64> = sources.iter().map(|_| r_route.random_range(0.5..1.5)).collect();
                        let total: f64 = raw.iter().sum();
                        for (sp, v) in sources.iter().zip(raw) {
                            w[(t, src_crit[*sp])] = v / total;
                        }
                    }
                }
            }
            // decoys: dense noise mixing plus group-symmetric class drive
            let mut r_dec = rng::stream(seed, &[S_DECOY, l as u64]);
            let src_decoys = decoys(l);
            let fan = (src_decoys.len().max(1)) as f64;
            for &t in &decoys(l + 1) {
                b[t] = DECOY_BIAS;
                for &s in &src_decoys {
                    w[(t, s)] = std_normal(&mut r_dec) / fan.sqrt();
                }
                for g in 0..n_out {
                    let members: Vec<usize> = (0..src_crit.len())
                        .filter(|&sp| match routing {
                            Routing::Routed => posterior[owner_at(l, sp)] == g,
                            Routing::Shared => group_of_critical(l, sp) == g,
                        })
                        .collect();
                    let loading = DECOY_LOADING * std_normal(&mut r_dec) / MECHANISM_AMPLITUDE;
                    for &sp in &members {
                        w[(t, src_crit[sp])] = loading / members.len() as f64;
                    }
                }
            }
        }
        weights.push(w);
        biases.push(b);
    }

    let mechanism_map = (0..k_true)
        .map(|m| MechanismRoute {
            latent: m,
            posterior: posterior[m],
            dominant: (0..n_layers - 1)
                .map(|l| {
                    crit[l]
                        .iter()
                        .enumerate()
                        .filter(|&(pos, _)| match (routing, l) {
                            (Routing::Routed, _) | (Routing::Shared, 0) => owner_at(l, pos) == m,
                            (Routing::Shared, _) => group_of_critical(l, pos) == posterior[m],
                        })
                        .map(|(_, &i)| i)
                        .collect()
                })
                .collect(),
        })
        .collect();

    let spec = SyntheticSpec {
        layer_widths: layer_widths.to_vec(),
        weights,
        biases,
        critical_sets: crit,
        k_true,
        routing,
        mechanism_map,
        input_means,
        input_noise_sd: INPUT_NOISE_SD,
        class_of_interest: n_out - 1,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}

/// Routed critical-path network: every latent mechanism drives its own
/// dominant critical neurons at each layer.
pub fn generate_spec(
    layer_widths: &[usize],
    critical_widths: &[usize],
    k_true: usize,
    seed: u64,
) -> Result<SyntheticSpec> {
    build(layer_widths, critical_widths, k_true, seed, Routing::Routed)
}

/// Prior-knowledge analog (routed) and conventional analog (shared) over
/// the same input distribution, critical index sets, and decoy noise.
pub fn prior_knowledge_pair(
    layer_widths: &[usize],
    critical_widths: &[usize],
    k_true: usize,
    seed: u64,
) -> Result<(SyntheticSpec, SyntheticSpec)> {
    Ok((
        build(layer_widths, critical_widths, k_true, seed, Routing::Routed)?,
        build(layer_widths, critical_widths, k_true, seed, Routing::Shared)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub latent: Vec<usize>,
    /// Fine labels: the latent mechanism itself.
    pub prior_labels: Vec<i64>,
    /// Coarse labels: the posterior class of the mechanism.
    pub posterior_labels: Vec<i64>,
}

/// Draw `n` samples: latent mechanism from `class_balance` (uniform when
/// `None`), inputs from that mechanism's Gaussian.
pub fn sample_dataset(spec: &SyntheticSpec, n: usize, class_balance: Option<&[f64]>, seed: u64) -> Result<Dataset> {
    let k = spec.k_true;
    let weights: Vec<f64> = match class_balance {
        Some(b) if b.len() != k || b.iter().any(|&p| !(p >= 0.0)) || b.iter().sum::<f64>() <= 0.0 => {
            return Err(Error::InvalidInput(format!(
                "class balance needs {k} nonnegative weights with positive sum"
            )))
        }
        Some(b) => b.to_vec(),
        None => vec![1.0; k],
    };
    let total: f64 = weights.iter().sum();
    let mut r = rng::stream(seed, &[0]);
    let width = spec.layer_widths[0];
    let mut inputs = DMatrix::zeros(n, width);
    let mut latent = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = r.random::<f64>() * total;
        let mut m = k - 1;
        for (c, &w) in weights.iter().enumerate() {
            if u < w {
                m = c;
                break;
            }
            u -= w;
        }
        for j in 0..width {
            inputs[(i, j)] = spec.input_means[m][j] + spec.input_noise_sd * std_normal(&mut r);
        }
        latent.push(m);
    }
    Ok(Dataset {
        prior_labels: latent.iter().map(|&m| m as i64).collect(),
        posterior_labels: latent.iter().map(|&m| spec.posterior_of(m) as i64).collect(),
        inputs,
        latent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Every layer, input first; hidden layers are post-activation.
    pub activations: Vec<DMatrix<f64>>,
    pub predictions: Vec<usize>,
}

impl ForwardPass {
    pub fn logits(&self) -> &DMatrix<f64> {
        self.activations.last().unwrap()
    }
}

/// `Z_{l+1} = relu(W_l Z_l + b_l)`, linear at the output. `hook(l, z)` may
/// modify each layer's post-activation values before they propagate.
pub fn forward_with(
    spec: &SyntheticSpec,
    inputs: &DMatrix<f64>,
    mut hook: impl FnMut(usize, &mut DMatrix<f64>) -> Result<()>,
) -> Result<ForwardPass> {
    if inputs.ncols() != spec.layer_widths[0] {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            spec.layer_widths[0]
        )));
    }
    let last = spec.layer_count() - 1;
    let mut z = inputs.clone();
    hook(0, &mut z)?;
    let mut activations = vec![z];
    for l in 0..last {
        let prev = activations.last().unwrap();
        let mut next = prev * spec.weights[l].transpose();
        for (j, mut col) in next.column_iter_mut().enumerate() {
            col.add_scalar_mut(spec.biases[l][j]);
        }
        if l + 1 < last {
            next.apply(|v| *v = v.max(0.0));
        }
        hook(l + 1, &mut next)?;
        activations.push(next);
    }
    let logits = activations.last().unwrap();
    let predictions = logits
        .row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect();
    Ok(ForwardPass {
        activations,
        predictions,
    })
}

/// Plain forward pass, or with per-sample additive noise at one layer.
/// `noise` is one row per sample (or a single row broadcast to all).
pub fn forward(
    spec: &SyntheticSpec,
    inputs: &DMatrix<f64>,
    noise: Option<(usize, &DMatrix<f64>)>,
) -> Result<ForwardPass> {
    forward_with(spec, inputs, |l, z| {
        if let Some((layer, rows)) = noise {
            if l == layer {
                if rows.ncols() != z.ncols() || (rows.nrows() != 1 && rows.nrows() != z.nrows()) {
                    return Err(Error::DimensionMismatch(format!(
                        "noise is {}x{}, layer {l} is {}x{}",
                        rows.nrows(),
                        rows.ncols(),
                        z.nrows(),
                        z.ncols()
                    )));
                }
                for i in 0..z.nrows() {
                    let r = if rows.nrows() == 1 { 0 } else { i };
                    for j in 0..z.ncols() {
                        z[(i, j)] += rows[(r, j)];
                    }
                }
            }
        }
        Ok(())
    })
}

impl ForwardPass {
    /// Record as a trace: every layer, response = class-of-interest logit,
    /// every sample in scope.
    pub fn to_trace(&self, spec: &SyntheticSpec, data: &Dataset) -> Result<ActivationTrace> {
        let layers = self
            .activations
            .iter()
            .enumerate()
            .map(|(l, z)| LayerMatrix::new(spec.layer_id(l), z.clone()))
            .collect::<Result<Vec<_>>>()?;
        let response = self.logits().column(spec.class_of_interest).iter().copied().collect();
        ActivationTrace::new(
            layers,
            response,
            Some(data.prior_labels.clone()),
            Some(data.posterior_labels.clone()),
            vec![true; data.inputs.nrows()],
        )
    }
}

/// Sample a dataset and record its trace in one go.
pub fn synth_trace(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<(Dataset, ActivationTrace)> {
    let data = sample_dataset(spec, n, None, seed)?;
    let trace = forward(spec, &data.inputs, None)?.to_trace(spec, &data)?;
    Ok((data, trace))
}

pub fn accuracy(predictions: &[usize], labels: &[i64]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p as i64 == l)
        .count();
    hits as f64 / predictions.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    const WIDTHS: [usize; 4] = [24, 20, 16, 2];
    const CRIT: [usize; 3] = [8, 8, 8];

    #[test]
    fn shape_errors() {
        assert!(generate_spec(&[4, 2], &[5], 1, 0).is_err());
        assert!(generate_spec(&[8, 8, 2], &[8, 3], 4, 0).unwrap_err().to_string().contains("capacity"));
        let e = generate_spec(&[8, 0, 2], &[4, 0], 1, 0).unwrap_err();
        assert!(e.to_string().contains("layer_widths[1]"));
        assert!(generate_spec(&[8], &[], 1, 0).is_err());
    }

    #[test]
    fn non_critical_never_feed_critical() {
        let (a, b) = prior_knowledge_pair(&WIDTHS, &CRIT, 4, 3).unwrap();
        for spec in [a, b] {
            for l in 0..spec.weights.len() {
                let src_crit = &spec.critical_sets[l];
                for &t in &spec.critical_sets[l + 1] {
                    for s in (0..spec.layer_widths[l]).filter(|s| !src_crit.contains(s)) {
                        assert_eq!(spec.weights[l][(t, s)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn dense_critical_network() {
        let spec = generate_spec(&[6, 6, 2], &[6, 6], 2, 1).unwrap();
        assert_eq!(spec.critical_sets[0], (0..6).collect::<Vec<_>>());
        assert_eq!(spec.critical_sets[1], (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn single_mechanism() {
        let spec = generate_spec(&[6, 5, 2], &[2, 2], 1, 1).unwrap();
        let d = sample_dataset(&spec, 50, None, 2).unwrap();
        assert!(d.latent.iter().all(|&m| m == 0));
        assert_eq!(spec.mechanism_map.len(), 1);
    }

    #[test]
    fn posterior_grouping_and_shapes() {
        let spec = generate_spec(&WIDTHS, &CRIT, 4, 5).unwrap();
        let d = sample_dataset(&spec, 400, None, 6).unwrap();
        let prior: std::collections::BTreeSet<_> = d.prior_labels.iter().collect();
        let post: std::collections::BTreeSet<_> = d.posterior_labels.iter().collect();
        assert_eq!(prior.len(), 4);
        assert_eq!(post.into_iter().copied().collect::<Vec<_>>(), vec![0, 1]);
        let one = sample_dataset(&spec, 1, None, 6).unwrap();
        assert_eq!(one.inputs.shape(), (1, 24));
        let pass = forward(&spec, &one.inputs, None).unwrap();
        assert_eq!(pass.to_trace(&spec, &one).unwrap().sample_count(), 1);
    }

    #[test]
    fn balanced_sampling_frequencies() {
        let spec = generate_spec(&WIDTHS, &CRIT, 4, 5).unwrap();
        let n = 4000;
        let d = sample_dataset(&spec, n, None, 8).unwrap();
        for m in 0..4 {
            let f = d.latent.iter().filter(|&&x| x == m).count() as f64 / n as f64;
            assert!((f - 0.25).abs() <= 3.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn forward_identity_and_zero_weights() {
        let mut spec = generate_spec(&[3, 3, 2], &[3, 3], 1, 0).unwrap();
        spec.weights[0] = DMatrix::identity(3, 3);
        spec.biases[0] = vec![0.0; 3];
        let x = DMatrix::from_row_slice(2, 3, &[0.5, 1.0, 2.0, 0.0, 3.0, 1.5]);
        let pass = forward(&spec, &x, None).unwrap();
        assert_eq!(pass.activations[1], x);

        spec.weights.iter_mut().for_each(|w| w.fill(0.0));
        spec.biases[1] = vec![0.25, -1.0];
        let pass = forward(&spec, &x, None).unwrap();
        for i in 0..2 {
            assert_eq!(pass.logits().row(i).iter().copied().collect::<Vec<_>>(), vec![0.25, -1.0]);
        }
        assert!(forward(&spec, &DMatrix::zeros(1, 4), None).is_err());
    }

    #[test]
    fn zero_noise_is_bit_exact() {
        let spec = generate_spec(&WIDTHS, &CRIT, 4, 1).unwrap();
        let d = sample_dataset(&spec, 50, None, 2).unwrap();
        let clean = forward(&spec, &d.inputs, None).unwrap();
        let zeros = DMatrix::zeros(1, 20);
        assert_eq!(forward(&spec, &d.inputs, Some((1, &zeros))).unwrap(), clean);
    }

    #[test]
    fn both_specs_are_accurate() {
        let (a, b) = prior_knowledge_pair(&WIDTHS, &CRIT, 4, 11).unwrap();
        for spec in [a, b] {
            let d = sample_dataset(&spec, 2000, None, 12).unwrap();
            let pass = forward(&spec, &d.inputs, None).unwrap();
            let acc = accuracy(&pass.predictions, &d.posterior_labels);
            assert!(acc >= 0.95, "{:?} accuracy {acc}", spec.routing);
        }
    }

    #[test]
    fn deterministic_and_serializable() {
        let p1 = prior_knowledge_pair(&WIDTHS, &CRIT, 4, 9).unwrap();
        let p2 = prior_knowledge_pair(&WIDTHS, &CRIT, 4, 9).unwrap();
        assert_eq!(p1, p2);
        let text = serde_json::to_string(&p1.0).unwrap();
        let back: SyntheticSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p1.0);
    }

    #[test]
    fn linear_case_basics() {
        let c = linear_gaussian_case(20, 5, 2.0, 0.0, 2000, 1).unwrap();
        assert_eq!(c.support.len(), 5);
        for j in 0..20 {
            assert_eq!(c.beta[j] != 0.0, c.support.contains(&j));
        }
        let tol = 5.0 / (2000f64).sqrt();
        for a in 0..20 {
            for b in (a + 1)..20 {
                let r = crate::linalg::correlation(c.x.column(a).as_slice(), c.x.column(b).as_slice());
                assert!(r.abs() <= tol);
            }
        }
        let null = linear_gaussian_case(10, 3, 0.0, 0.3, 10, 1).unwrap();
        assert!(null.support.is_empty());
        assert!(linear_gaussian_case(3, 4, 1.0, 0.0, 5, 0).is_err());
        assert!(linear_gaussian_case(3, 1, 1.0, 1.0, 5, 0).is_err());
    }
}
