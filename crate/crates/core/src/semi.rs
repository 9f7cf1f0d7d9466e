//! MixMatch-style label correction: guessing labels from weak views,
//! refining noisy labels with the clean posterior, sharpening, one-sided
//! mixup of labeled and unlabeled batches and the resulting losses.

use serde::{Deserialize, Serialize};

use crate::contrastive::LossTerms;
use crate::data::{augment_rows, AugmentationSpec};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars};
use crate::rng::{Rng, SymmetricBeta};
use crate::tensor::{Tape, Tensor, Var};

const MEAN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiConfig {
    pub sharpen_temperature: f64,
    /// Weak augmentations averaged per guess.
    pub guesses: usize,
    pub mix_alpha: f64,
    pub unlabeled_weight: f64,
    pub prior_weight: f64,
    /// Class prior; the dataset's prior when absent.
    pub prior: Option<Vec<f64>>,
}

impl Default for SemiConfig {
    fn default() -> Self {
        Self {
            sharpen_temperature: 0.5,
            guesses: 2,
            mix_alpha: 4.0,
            unlabeled_weight: 25.0,
            prior_weight: 1.0,
            prior: None,
        }
    }
}

impl SemiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpen_temperature > 0.0) {
            return Err(Error::invalid("sharpen_temperature must be positive"));
        }
        if self.guesses < 1 {
            return Err(Error::invalid("guesses must be at least 1"));
        }
        if !(self.mix_alpha > 0.0) {
            return Err(Error::invalid("mix_alpha must be positive"));
        }
        if !(self.unlabeled_weight >= 0.0) || !(self.prior_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if let Some(p) = &self.prior {
            check_distribution(p).map_err(|e| e.context("prior"))?;
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("not a probability vector: {p:?}")));
    }
    Ok(())
}

/// Average prediction over `guesses` weak augmentations of `x` and over all
/// given networks. Each augmentation is shared by the networks.
pub fn co_guess(
    models: &[&ModelParams],
    x: &Tensor,
    guesses: usize,
    spec: &AugmentationSpec,
    rng: &mut Rng,
) -> Result<Tensor> {
    if models.is_empty() || guesses == 0 {
        return Err(Error::invalid("co_guess needs at least one model and one guess"));
    }
    let (n, _) = x.dims2();
    let c = models[0].arch().num_classes;
    let mut acc = Tensor::zeros(&[n, c]);
    for _ in 0..guesses {
        let view = augment_rows(x, spec, rng);
        for m in models {
            let p = m.predict_proba(&view)?;
            acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
        }
    }
    let k = (guesses * models.len()) as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= k);
    Ok(acc)
}

/// `w * onehot(y) + (1 - w) * p`
pub fn refine(label: usize, guess: &[f64], clean_prob: f64) -> Vec<f64> {
    guess
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let y = if c == label { 1.0 } else { 0.0 };
            clean_prob * y + (1.0 - clean_prob) * p
        })
        .collect()
}

pub fn refine_rows(labels: &[usize], guesses: &Tensor, clean_prob: &[f64]) -> Result<Tensor> {
    let (n, c) = guesses.dims2();
    if labels.len() != n || clean_prob.len() != n {
        return Err(Error::invalid("refine: labels, guesses and weights differ in length"));
    }
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        if labels[i] >= c || !(0.0..=1.0).contains(&clean_prob[i]) {
            return Err(Error::invalid(format!("refine: bad label or weight at row {i}")));
        }
        data.extend(refine(labels[i], guesses.row(i), clean_prob[i]));
    }
    Tensor::new(vec![n, c], data)
}

/// `q^(1/T)` renormalized.
pub fn sharpen(q: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "sharpen temperature must be positive, got {temperature}"
        )));
    }
    let powered: Vec<f64> = q.iter().map(|&v| v.max(0.0).powf(1.0 / temperature)).collect();
    let total: f64 = powered.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::invalid("cannot sharpen an all-zero vector"));
    }
    Ok(powered.into_iter().map(|v| v / total).collect())
}

pub fn sharpen_rows(q: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, c) = q.dims2();
    let mut data = Vec::with_capacity(n * c);
    for row in q.row_iter() {
        data.extend(sharpen(row, temperature)?);
    }
    Tensor::new(vec![n, c], data)
}

/// Mixed labeled set `x', y'` and mixed unlabeled set `u', p'`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMatchBatch {
    pub inputs_x: Tensor,
    pub targets_x: Tensor,
    pub inputs_u: Tensor,
    pub targets_u: Tensor,
    /// Weight on the labeled sample in `x'`; always at least 0.5. `u'` uses `1 - lambda`.
    pub lambdas: Vec<f64>,
}

/// `max(l, 1 - l)` for `l ~ Beta(alpha, alpha)`, one per pair.
pub fn draw_mix_weights(n: usize, alpha: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let beta = SymmetricBeta::new(alpha)?;
    Ok((0..n)
        .map(|_| {
            let l = beta.sample(rng);
            l.max(1.0 - l)
        })
        .collect())
}

fn lerp_rows(a: &Tensor, b: &Tensor, weights: &[f64]) -> Tensor {
    let (n, d) = a.dims2();
    let mut data = Vec::with_capacity(n * d);
    for (i, &l) in weights.iter().enumerate() {
        data.extend(a.row(i).iter().zip(b.row(i)).map(|(x, y)| l * x + (1.0 - l) * y));
    }
    Tensor::new(vec![n, d], data).expect("shape")
}

/// Pairs labeled row `i` with unlabeled row `i` using the given weights.
pub fn mixmatch_with(x: &Tensor, y: &Tensor, u: &Tensor, p: &Tensor, lambdas: Vec<f64>) -> Result<MixMatchBatch> {
    if x.shape() != u.shape() || y.shape() != p.shape() || x.rows() != y.rows() || lambdas.len() != x.rows() {
        return Err(Error::Shape {
            op: "mixmatch",
            shapes: vec![
                x.shape().to_vec(),
                y.shape().to_vec(),
                u.shape().to_vec(),
                p.shape().to_vec(),
            ],
        });
    }
    let flipped: Vec<f64> = lambdas.iter().map(|l| 1.0 - l).collect();
    Ok(MixMatchBatch {
        inputs_x: lerp_rows(x, u, &lambdas),
        targets_x: lerp_rows(y, p, &lambdas),
        inputs_u: lerp_rows(x, u, &flipped),
        targets_u: lerp_rows(y, p, &flipped),
        lambdas,
    })
}

pub fn mixmatch(x: &Tensor, y: &Tensor, u: &Tensor, p: &Tensor, alpha: f64, rng: &mut Rng) -> Result<MixMatchBatch> {
    let lambdas = draw_mix_weights(x.rows(), alpha, rng)?;
    mixmatch_with(x, y, u, p, lambdas)
}

/// Labeled and unlabeled losses plus the probability rows over `X' ∪ U'`.
pub struct SemiLosses {
    pub labeled: Var,
    pub unlabeled: Var,
    pub probs: Var,
}

/// `L_X' = -mean y'^T log p(x')`, `L_U' = mean ||p' - p(u')||^2`.
pub fn semi_losses(tape: &mut Tape, vars: &ModelVars, batch: &MixMatchBatch) -> Result<SemiLosses> {
    let n = batch.inputs_x.rows();
    let m = batch.inputs_u.rows();
    let xv = tape.constant(batch.inputs_x.clone());
    let uv = tape.constant(batch.inputs_u.clone());
    let inputs = tape.concat_rows(&[xv, uv])?;
    let z = vars.encode(tape, inputs)?;
    let logits = vars.logits(tape, z)?;
    let probs = tape.softmax_rows(logits)?;

    let lx = tape.select_rows(logits, (0..n).collect())?;
    let log_px = tape.log_softmax_rows(lx)?;
    let w = Tensor::new(
        batch.targets_x.shape().to_vec(),
        batch.targets_x.data().iter().map(|t| -t / n as f64).collect(),
    )?;
    let labeled = tape.masked_sum(log_px, w)?;

    let pu = tape.select_rows(probs, (n..n + m).collect())?;
    let target = tape.constant(batch.targets_u.clone());
    let diff = tape.sub(pu, target)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    let unlabeled = tape.scale(total, 1.0 / m as f64)?;
    Ok(SemiLosses {
        labeled,
        unlabeled,
        probs,
    })
}

/// `sum_c pi_c log(pi_c / mean_c)` where `mean_c` is the batch-average
/// predicted probability, floored at 1e-12.
pub fn prior_reg(tape: &mut Tape, probs: Var, prior: &[f64]) -> Result<Var> {
    check_distribution(prior)?;
    let (n, c) = tape.value(probs).dims2();
    if prior.len() != c {
        return Err(Error::invalid(format!(
            "prior has {} entries for {c} classes",
            prior.len()
        )));
    }
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let mut mean = tape.matmul(avg, probs)?;
    let low: Vec<f64> = tape
        .value(mean)
        .data()
        .iter()
        .map(|&v| (MEAN_FLOOR - v).max(0.0))
        .collect();
    if low.iter().any(|&v| v > 0.0) {
        log::warn!("batch-average prediction below {MEAN_FLOOR} for some class; clamped");
        let shift = tape.constant(Tensor::new(vec![1, c], low)?);
        mean = tape.add(mean, shift)?;
    }
    let log_mean = tape.log(mean)?;
    let cross = tape.masked_sum(log_mean, Tensor::new(vec![1, c], prior.iter().map(|p| -p).collect())?)?;
    let neg_entropy: f64 = prior.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum();
    let offset = tape.constant(Tensor::scalar(neg_entropy));
    tape.add(cross, offset)
}

/// `L_X' + unlabeled_weight * L_U' + prior_weight * L_reg`
pub fn noise_corrector_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    batch: &MixMatchBatch,
    unlabeled_weight: f64,
    prior_weight: f64,
    prior: &[f64],
) -> Result<LossTerms> {
    let s = semi_losses(tape, vars, batch)?;
    let reg = prior_reg(tape, s.probs, prior)?;
    let total = tape
        .weighted_sum(&[(1.0, s.labeled), (unlabeled_weight, s.unlabeled), (prior_weight, reg)])?
        .expect("labeled term has weight 1");
    Ok(LossTerms {
        total,
        parts: vec![
            ("labeled", tape.value(s.labeled).item()),
            ("unlabeled", tape.value(s.unlabeled).item()),
            ("prior", tape.value(reg).item()),
        ],
    })
}

/// Direct evaluation of the label-diffusion objective for pairs
/// `(x_i, u_i)` with one-sided weights `lambdas`:
/// cross-entropy of `p(l x + (1-l) u)` against `l y + (1-l) p_u`, plus
/// `unlabeled_weight` times the squared error of `p((1-l) x + l u)` against
/// `(1-l) y + l p_u`, averaged over pairs. `guesses_u` are treated as constants.
pub fn diffusion_loss_reference(
    tape: &mut Tape,
    vars: &ModelVars,
    x: &Tensor,
    labels: &[usize],
    u: &Tensor,
    guesses_u: &Tensor,
    lambdas: &[f64],
    unlabeled_weight: f64,
) -> Result<Var> {
    let (n, c) = guesses_u.dims2();
    if labels.len() != n || lambdas.len() != n || x.rows() != n || u.rows() != n {
        return Err(Error::invalid("diffusion reference: batch sizes differ"));
    }
    let mut total: Option<Var> = None;
    for i in 0..n {
        let l = lambdas[i];
        let onehot: Vec<f64> = (0..c).map(|k| if k == labels[i] { 1.0 } else { 0.0 }).collect();
        let mix = |a: f64| -> Vec<f64> {
            x.row(i)
                .iter()
                .zip(u.row(i))
                .map(|(p, q)| a * p + (1.0 - a) * q)
                .collect()
        };
        let target = |a: f64| -> Vec<f64> {
            onehot
                .iter()
                .zip(guesses_u.row(i))
                .map(|(y, p)| a * y + (1.0 - a) * p)
                .collect()
        };

        let near = tape.constant(Tensor::new(vec![1, x.cols()], mix(l))?);
        let z = vars.encode(tape, near)?;
        let logits = vars.logits(tape, z)?;
        let logp = tape.log_softmax_rows(logits)?;
        let ce = tape.masked_sum(logp, Tensor::new(vec![1, c], target(l).iter().map(|t| -t).collect())?)?;

        let far = tape.constant(Tensor::new(vec![1, x.cols()], mix(1.0 - l))?);
        let p_far = vars.classify(tape, far)?;
        let t = tape.constant(Tensor::new(vec![1, c], target(1.0 - l))?);
        let diff = tape.sub(t, p_far)?;
        let sq = tape.square(diff)?;
        let se = tape.sum(sq)?;

        let term = tape
            .weighted_sum(&[(1.0, ce), (unlabeled_weight, se)])?
            .expect("ce weight 1");
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.scale(total.expect("n >= 1"), 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::seeded;

    #[test]
    fn refine_endpoints() {
        assert_eq!(refine(0, &[0.2, 0.8], 1.0), vec![1.0, 0.0]);
        assert_eq!(refine(0, &[0.2, 0.8], 0.0), vec![0.2, 0.8]);
        let r = refine(0, &[0.2, 0.8], 0.5);
        assert!((r[0] - 0.6).abs() < 1e-15 && (r[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sharpen_values() {
        let q = [0.6, 0.4];
        assert_eq!(sharpen(&q, 1.0).unwrap(), vec![0.6, 0.4]);
        let s = sharpen(&q, 0.5).unwrap();
        assert!((s[0] - 0.36 / 0.52).abs() < 1e-12);
        assert!((s[0] - 0.6923).abs() < 1e-4);
        assert_eq!(sharpen(&[0.25; 4], 0.3).unwrap(), vec![0.25; 4]);
        assert!(sharpen(&[0.0, 0.0], 0.5).is_err());
        assert!(sharpen(&q, 0.0).is_err());
    }

    #[test]
    fn mixmatch_interpolates() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let u = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let b = mixmatch_with(&x, &x, &u, &u, vec![0.7]).unwrap();
        assert!((b.inputs_x.data()[0] - 0.7).abs() < 1e-15);
        assert!((b.inputs_u.data()[0] - 0.3).abs() < 1e-15);
        let w = draw_mix_weights(200, 4.0, &mut seeded(1)).unwrap();
        assert!(w.iter().all(|&l| (0.5..=1.0).contains(&l)));
        assert!(mixmatch_with(&x, &x, &u, &u, vec![]).is_err());
    }

    #[test]
    fn prior_reg_values() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.3]]).unwrap());
        let r = prior_reg(&mut tape, p, &[0.5, 0.5]).unwrap();
        let expect = 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln();
        assert!((tape.value(r).item() - expect).abs() < 1e-12);
        assert!((expect - 0.22314).abs() < 1e-5);
        let q = tape.param(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap());
        let zero = prior_reg(&mut tape, q, &[0.5, 0.5]).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
    }

    #[test]
    fn co_guess_single_identity_equals_classify() {
        let arch = Architecture {
            input_dim: 3,
            encoder_dims: vec![5],
            projector_dims: vec![4],
            num_classes: 3,
        };
        let m = ModelParams::init_seeded(&arch, 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, -0.4, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let g = co_guess(&[&m], &x, 1, &AugmentationSpec::identity(), &mut seeded(0)).unwrap();
        assert_eq!(g, m.predict_proba(&x).unwrap());
        let other = m.fresh(9);
        let both = co_guess(&[&m, &other], &x, 2, &AugmentationSpec::weak(1.0), &mut seeded(0)).unwrap();
        for row in both.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_zero_losses() {
        let arch = Architecture {
            input_dim: 2,
            encoder_dims: vec![2],
            projector_dims: vec![2],
            num_classes: 2,
        };
        let m = ModelParams::zeros(&arch).unwrap();
        // zero model predicts [0.5, 0.5] everywhere
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let half = Tensor::full(&[2, 2], 0.5);
        let b = mixmatch_with(&x, &half, &x, &half, vec![0.8, 0.6]).unwrap();
        let mut tape = Tape::new();
        let vars = m.attach(&mut tape);
        let s = semi_losses(&mut tape, &vars, &b).unwrap();
        assert_eq!(tape.value(s.unlabeled).item(), 0.0);
        assert!((tape.value(s.labeled).item() - 2f64.ln()).abs() < 1e-12);
        let terms = noise_corrector_loss(&mut tape, &vars, &b, 0.0, 0.0, &[0.5, 0.5]).unwrap();
        assert!((tape.value(terms.total).item() - 2f64.ln()).abs() < 1e-12);
    }
}
