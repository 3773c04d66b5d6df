//! Stochastic linear encoder, state-predictive decoder and the
//! self-consistent label refinement that merges away short-lived states.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, DenseTape, Linear, Parameters};

const LN_2PI: f64 = 1.8378770664093453;

/// Gaussian encoder `p(z | x) = N(W x + b, diag(exp(log_var)))`; the variance
/// does not depend on the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub mean: Linear,
    pub log_var: Array1<f64>,
}

impl Encoder {
    pub fn new(input_dim: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (1.0 / input_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((input_dim, latent_dim), |_| rng.gen_range(-limit..limit));
        Encoder {
            mean: Linear { weight, bias: Array1::zeros(latent_dim) },
            log_var: Array1::zeros(latent_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.outputs()
    }

    pub fn std(&self) -> Array1<f64> {
        self.log_var.mapv(|lv| (0.5 * lv).exp())
    }

    /// Deterministic encoding (posterior mean).
    pub fn mean(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), actual: x.ncols() });
        }
        let mu = self.mean.forward(x);
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder mean".into()));
        }
        Ok(mu)
    }

    /// Reparameterised draw `z = mean(x) + std * noise`, one noise row per input row.
    pub fn encode(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut z = self.mean(x)?;
        if noise.dim() != z.dim() {
            return Err(Error::Shape(format!("noise {:?} vs latents {:?}", noise.dim(), z.dim())));
        }
        z += &(&noise * &self.std());
        Ok(z)
    }
}

/// Dense network ending in logits over the active states; probabilities via softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub net: DenseNet,
}

impl Decoder {
    pub fn new(latent_dim: usize, hidden: &[usize], num_states: usize, rng: &mut impl Rng) -> Self {
        let mut widths = vec![latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(num_states);
        Decoder { net: DenseNet::new(&widths, Activation::Relu, Activation::Identity, rng) }
    }

    pub fn num_states(&self) -> usize {
        self.net.output_width()
    }

    pub fn logits(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder input".into()));
        }
        self.net.forward(z)
    }

    pub fn probabilities(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits(z)?))
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn log_softmax_at(row: ArrayView1<f64>, idx: usize) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpibModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Forward-pass values needed by [`SpibModel::backward`].
pub struct SpibForward {
    x: Array2<f64>,
    noise: Array2<f64>,
    std: Array1<f64>,
    pub z: Array2<f64>,
    pub logits: Array2<f64>,
    tape: DenseTape,
}

/// Batch means of the two encoder/decoder terms of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpibTerms {
    /// Cross-entropy `-log q(y | z)`.
    pub prediction: f64,
    /// Posterior log-density `log p(z | x)` at the drawn `z`.
    pub posterior: f64,
}

impl SpibModel {
    pub fn new(input_dim: usize, latent_dim: usize, decoder_hidden: &[usize], num_states: usize, rng: &mut impl Rng) -> Self {
        SpibModel {
            encoder: Encoder::new(input_dim, latent_dim, rng),
            decoder: Decoder::new(latent_dim, decoder_hidden, num_states, rng),
        }
    }

    pub fn num_states(&self) -> usize {
        self.decoder.num_states()
    }

    pub fn forward(&self, x: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<SpibForward> {
        let z = self.encoder.encode(x, noise)?;
        let (logits, tape) = self.decoder.net.forward_tape(z.view())?;
        Ok(SpibForward { x: x.to_owned(), noise: noise.to_owned(), std: self.encoder.std(), z, logits, tape })
    }

    pub fn terms(&self, fwd: &SpibForward, labels: &[usize]) -> Result<SpibTerms> {
        let b = fwd.z.nrows();
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        check_labels(labels, b, self.num_states())?;
        let prediction = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax_at(fwd.logits.row(i), y))
            .sum::<f64>()
            / b as f64;
        let lv_sum = self.encoder.log_var.sum();
        let d = self.encoder.latent_dim() as f64;
        let posterior = fwd
            .noise
            .rows()
            .into_iter()
            .map(|xi| -0.5 * (d * LN_2PI + lv_sum + xi.dot(&xi)))
            .sum::<f64>()
            / b as f64;
        Ok(SpibTerms { prediction, posterior })
    }

    /// Gradient of `prediction + beta * posterior` (batch means), plus any
    /// extra gradient with respect to the drawn latents, e.g. from a prior term.
    pub fn backward(
        &self,
        fwd: &SpibForward,
        labels: &[usize],
        beta: f64,
        d_latent: Option<ArrayView2<f64>>,
    ) -> Result<SpibModel> {
        let b = fwd.z.nrows();
        check_labels(labels, b, self.num_states())?;
        let mut d_logits = softmax_rows(&fwd.logits);
        for (i, &y) in labels.iter().enumerate() {
            d_logits[[i, y]] -= 1.0;
        }
        d_logits /= b as f64;
        let mut grads = self.zeros_like();
        let mut dz = self.decoder.net.backward(&fwd.tape, d_logits.view(), &mut grads.decoder.net);
        if let Some(extra) = d_latent {
            dz += &extra;
        }
        self.encoder.mean.accumulate(fwd.x.view(), dz.view(), &mut grads.encoder.mean);
        let dz_noise = (&dz * &fwd.noise).sum_axis(Axis(0));
        grads.encoder.log_var = &dz_noise * &fwd.std * 0.5 - 0.5 * beta;
        Ok(grads)
    }

    /// Drop decoder outputs not listed in `keep` (indices into the current states).
    pub fn retain_states(&mut self, keep: &[usize]) {
        self.decoder.net.layers.last_mut().expect("decoder has layers").retain_outputs(keep);
    }
}

fn check_labels(labels: &[usize], batch: usize, states: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), batch)));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= states) {
        return Err(Error::InactiveState { label, states });
    }
    Ok(())
}

impl Parameters for SpibModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![
            self.encoder.mean.weight.as_slice().expect("standard layout"),
            self.encoder.mean.bias.as_slice().expect("standard layout"),
            self.encoder.log_var.as_slice().expect("standard layout"),
        ];
        t.extend(self.decoder.net.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.encoder.mean.weight.as_slice_mut().expect("standard layout"),
            self.encoder.mean.bias.as_slice_mut().expect("standard layout"),
            self.encoder.log_var.as_slice_mut().expect("standard layout"),
        ];
        t.extend(self.decoder.net.tensors_mut());
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = vec!["encoder.mean.weight".to_string(), "encoder.mean.bias".into(), "encoder.log_var".into()];
        n.extend(self.decoder.net.tensor_names().into_iter().map(|s| format!("decoder.{s}")));
        n
    }
}

/// Standard-normal prior cross-entropy `-log N(z; 0, I)` per sample (batch mean)
/// and its gradient with respect to `z` (already divided by the batch size).
pub fn standard_normal_prior(z: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = z.nrows() as f64;
    let d = z.ncols() as f64;
    let value = z.rows().into_iter().map(|r| 0.5 * (d * LN_2PI + r.dot(&r))).sum::<f64>() / b;
    (value, z.to_owned() / b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum StateEvent {
    Dropped { round: usize, state: usize, population: f64 },
    Relabeled { round: usize, changed_fraction: f64 },
}

/// Active states (by their original k-means id) and their populations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBook {
    pub active: Vec<usize>,
    pub populations: Vec<f64>,
    pub history: Vec<StateEvent>,
}

impl StateBook {
    pub fn from_labels(labels: &[usize], num_states: usize) -> Self {
        StateBook {
            active: (0..num_states).collect(),
            populations: populations(labels, num_states),
            history: Vec::new(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.active.len()
    }
}

fn populations(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    /// New per-frame labels, indexing the surviving states.
    pub labels: Vec<usize>,
    /// Indices (into the previous state list) of the surviving states.
    pub keep: Vec<usize>,
    pub changed_fraction: f64,
    pub book: StateBook,
}

const REFINE_CHUNK: usize = 1 << 15;

/// Relabel every frame by the decoder's most probable state at its mean
/// encoding, then drop states whose population is below `min_population`
/// (their frames fall to the best surviving state).
pub fn refine_labels(
    model: &SpibModel,
    features: ArrayView2<f64>,
    labels: &[usize],
    book: &StateBook,
    min_population: f64,
    round: usize,
) -> Result<Refinement> {
    let n = features.nrows();
    let k = model.num_states();
    if n == 0 {
        return Err(Error::Empty("features to relabel"));
    }
    if labels.len() != n || book.num_states() != k {
        return Err(Error::Shape("labels, state book and decoder disagree".into()));
    }
    let mut logits = Array2::zeros((n, k));
    for start in (0..n).step_by(REFINE_CHUNK) {
        let end = (start + REFINE_CHUNK).min(n);
        let mu = model.encoder.mean(features.slice(s![start..end, ..]))?;
        logits.slice_mut(s![start..end, ..]).assign(&model.decoder.logits(mu.view())?);
    }
    let argmax_over = |row: ArrayView1<f64>, allowed: &[usize]| -> usize {
        let mut best = 0;
        for (pos, &s) in allowed.iter().enumerate() {
            if row[s] > row[allowed[best]] {
                best = pos;
            }
        }
        best
    };

    let all: Vec<usize> = (0..k).collect();
    let first: Vec<usize> = logits.rows().into_iter().map(|r| argmax_over(r, &all)).collect();
    let pops = populations(&first, k);
    let keep: Vec<usize> = (0..k).filter(|&s| pops[s] >= min_population && pops[s] > 0.0).collect();
    if keep.len() < 2 {
        return Err(Error::StateCollapse { remaining: keep.len() });
    }
    let new_labels: Vec<usize> = if keep.len() == k {
        first
    } else {
        logits.rows().into_iter().map(|r| argmax_over(r, &keep)).collect()
    };
    let changed = new_labels.iter().zip(labels).filter(|(&new, &old)| keep[new] != old).count();
    let changed_fraction = changed as f64 / n as f64;

    let mut history = book.history.clone();
    for s in 0..k {
        if !keep.contains(&s) {
            history.push(StateEvent::Dropped { round, state: book.active[s], population: pops[s] });
        }
    }
    history.push(StateEvent::Relabeled { round, changed_fraction });
    let new_book = StateBook {
        active: keep.iter().map(|&s| book.active[s]).collect(),
        populations: populations(&new_labels, keep.len()),
        history,
    };
    Ok(Refinement { labels: new_labels, keep, changed_fraction, book: new_book })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn zero_noise_gives_mean() {
        let enc = Encoder::new(3, 2, &mut rng());
        let x = array![[0.1, 0.2, 0.3]];
        assert_eq!(enc.encode(x.view(), Array2::zeros((1, 2)).view()).unwrap(), enc.mean(x.view()).unwrap());
    }

    #[test]
    fn very_negative_log_var_is_deterministic() {
        let mut enc = Encoder::new(2, 2, &mut rng());
        enc.log_var.fill(-200.0);
        let x = array![[1.0, -1.0]];
        let z = enc.encode(x.view(), array![[3.0, -2.0]].view()).unwrap();
        let mu = enc.mean(x.view()).unwrap();
        assert!((&z - &mu).iter().all(|v| v.abs() < 1e-40));
    }

    #[test]
    fn encoder_draw_variance_matches_log_var() {
        let mut enc = Encoder::new(2, 2, &mut rng());
        enc.log_var = array![0.4, -1.3];
        let n = 10_000;
        let x = Array2::from_elem((n, 2), 0.7);
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let noise = Array2::from_shape_fn((n, 2), |_| StandardNormal.sample(&mut r));
        let z = enc.encode(x.view(), noise.view()).unwrap();
        for j in 0..2 {
            let col = z.column(j);
            let m = col.mean().unwrap();
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expected = enc.log_var[j].exp();
            assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
        }
    }

    #[test]
    fn decoder_outputs_probabilities() {
        let dec = Decoder::new(2, &[8], 4, &mut rng());
        let p = dec.probabilities(array![[0.3, -4.0], [10.0, 2.0]].view()).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_final_layer_is_uniform() {
        let mut dec = Decoder::new(2, &[8], 5, &mut rng());
        let last = dec.net.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let p = dec.probabilities(array![[1.0, 2.0]].view()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_hand_values() {
        // e^1, e^2, e^3 over their sum
        let p = softmax_rows(&array![[1.0, 2.0, 3.0]]);
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn model_with_logits(logits: Array1<f64>) -> SpibModel {
        let mut m = SpibModel::new(2, 2, &[4], logits.len(), &mut rng());
        let last = m.decoder.net.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias = logits;
        m
    }

    #[test]
    fn uniform_decoder_loss_is_log_k() {
        let m = model_with_logits(Array1::zeros(4));
        let x = array![[0.1, 0.2], [0.5, -0.3], [1.0, 1.0]];
        let fwd = m.forward(x.view(), Array2::zeros((3, 2)).view()).unwrap();
        let t = m.terms(&fwd, &[0, 3, 1]).unwrap();
        assert!((t.prediction - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_decoder_loss_is_zero() {
        let m = model_with_logits(array![800.0, 0.0, 0.0]);
        let fwd = m.forward(array![[0.1, 0.2]].view(), Array2::zeros((1, 2)).view()).unwrap();
        assert!(m.terms(&fwd, &[0]).unwrap().prediction.abs() < 1e-12);
    }

    #[test]
    fn inactive_label_rejected() {
        let m = model_with_logits(Array1::zeros(3));
        let fwd = m.forward(array![[0.1, 0.2]].view(), Array2::zeros((1, 2)).view()).unwrap();
        assert!(matches!(m.terms(&fwd, &[3]), Err(Error::InactiveState { label: 3, states: 3 })));
    }

    #[test]
    fn posterior_term_is_gaussian_log_density() {
        let mut m = model_with_logits(Array1::zeros(2));
        m.encoder.log_var = array![0.3, -0.8];
        let x = array![[0.4, 0.9], [-1.0, 0.2]];
        let noise = array![[0.5, -1.5], [2.0, 0.1]];
        let fwd = m.forward(x.view(), noise.view()).unwrap();
        let mu = m.encoder.mean(x.view()).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let var = m.encoder.log_var[j].exp();
                let dz = fwd.z[[i, j]] - mu[[i, j]];
                expected += -0.5 * (2.0 * std::f64::consts::PI * var).ln() - dz * dz / (2.0 * var);
            }
        }
        expected /= 2.0;
        assert!((m.terms(&fwd, &[0, 1]).unwrap().posterior - expected).abs() < 1e-12);
    }

    #[test]
    fn beta_zero_deterministic_encoder_is_pure_prediction() {
        let m = SpibModel::new(2, 2, &[6], 3, &mut rng());
        let x = array![[0.4, 0.9], [-1.0, 0.2], [0.0, 0.3]];
        let fwd = m.forward(x.view(), Array2::zeros((3, 2)).view()).unwrap();
        let g = m.backward(&fwd, &[0, 2, 1], 0.0, None).unwrap();
        // with zero noise and beta = 0 the log-variance receives no gradient at all
        assert!(g.encoder.log_var.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refinement_drops_unpopulated_states() {
        // decoder whose argmax depends only on sign of z0: states 0 and 2 ever win
        let mut m = SpibModel::new(2, 2, &[2], 3, &mut rng());
        m.encoder.mean.weight = Array2::eye(2);
        m.encoder.mean.bias.fill(0.0);
        let l0 = &mut m.decoder.net.layers[0];
        l0.weight = array![[1.0, -1.0], [0.0, 0.0]];
        l0.bias.fill(0.0);
        let l1 = &mut m.decoder.net.layers[1];
        l1.weight = array![[5.0, 0.0, -5.0], [-5.0, 0.0, 5.0]];
        l1.bias = array![0.0, -1.0, 0.0];
        let feats = Array2::from_shape_fn((100, 2), |(i, j)| if j == 0 { i as f64 - 49.5 } else { 0.0 });
        let labels = vec![1; 100];
        let book = StateBook::from_labels(&labels, 3);
        let r = refine_labels(&m, feats.view(), &labels, &book, 0.01, 0).unwrap();
        assert_eq!(r.keep, vec![0, 2]);
        assert_eq!(r.book.active, vec![0, 2]);
        assert!((r.changed_fraction - 1.0).abs() < 1e-12);
        assert!((r.book.populations.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        m.retain_states(&r.keep);
        assert_eq!(m.num_states(), 2);
        // fixed point: a second pass changes nothing
        let again = refine_labels(&m, feats.view(), &r.labels, &r.book, 0.01, 1).unwrap();
        assert_eq!(again.labels, r.labels);
        assert_eq!(again.changed_fraction, 0.0);
        assert_eq!(again.keep, vec![0, 1]);
    }

    #[test]
    fn collapse_is_an_error() {
        let m = model_with_logits(array![10.0, 0.0, 0.0]);
        let feats = Array2::zeros((20, 2));
        let labels = vec![0; 20];
        let book = StateBook::from_labels(&labels, 3);
        assert!(matches!(
            refine_labels(&m, feats.view(), &labels, &book, 0.01, 0),
            Err(Error::StateCollapse { remaining: 1 })
        ));
    }
}
