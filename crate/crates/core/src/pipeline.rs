//! Two-stage training: contrastive pretraining, classifier warm-up, then
//! repeated GMM splits with contrastive refinement on the clean part and
//! label correction on the rest.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{build_mix_pairs, clplus_loss, pretrain_loss, CleanBatch, ContrastiveConfig, LossTerms, Mode};
use crate::data::{augment_rows, AugmentationSpec, ClassPartition, NoisyDataset};
use crate::detector::{fit_gmm_em, infer_partition, per_sample_ce, EmSettings, Recording, SplitResult};
use crate::error::{Error, Result};
use crate::metrics::{
    detection_quality, ensemble_proba, representation_report, test_accuracy, EvalSettings, MetricsReport,
};
use crate::model::{sgd_step, Architecture, ModelParams, ModelVars, OptimizerState, ParamGroups};
use crate::rng::{derive_seed, derived, Rng};
use crate::semi::{co_guess, mixmatch, noise_corrector_loss, refine_rows, sharpen_rows, MixMatchBatch, SemiConfig};
use crate::tensor::{Tape, Tensor, Var};

const TAG_INIT: u64 = 1;
const TAG_PRETRAIN: u64 = 2;
const TAG_WARMUP: u64 = 3;
const TAG_SEMI: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_BASELINE: u64 = 6;
const TAG_ASYM_PAIRS: u64 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// A sample is clean iff its noisy posterior is below this.
    pub threshold: f64,
    pub em: EmSettings,
    pub partition_threshold: f64,
    pub max_subset_size: usize,
    pub recording: Recording,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            em: EmSettings::default(),
            partition_threshold: 0.9,
            max_subset_size: 3,
            recording: Recording::EveryK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub pretrain_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stage-two epoch from which the learning rate is divided by `decay_factor`.
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            pretrain_learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_epoch: None,
            decay_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub semi_epochs: usize,
    /// Optimizer steps per stage-two epoch; derived from the dataset size when absent.
    pub iterations: Option<usize>,
    /// Pretraining draws `2 * pretrain_batch` samples per step.
    pub pretrain_batch: usize,
    pub warmup_batch: usize,
    /// Stage two draws `2 * semi_batch` clean and as many noisy samples per step.
    pub semi_batch: usize,
    pub mode: Mode,
    pub contrastive: ContrastiveConfig,
    pub semi: SemiConfig,
    pub detector: DetectorConfig,
    pub optimizer: OptimizerConfig,
    pub dual_network: bool,
    pub confidence_penalty_weight: f64,
    pub architecture: Option<Architecture>,
    pub eval: EvalSettings,
    /// Representation diagnostics every this many epochs; 0 means only in the final record.
    pub representation_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            warmup_epochs: 10,
            semi_epochs: 30,
            iterations: None,
            pretrain_batch: 64,
            warmup_batch: 64,
            semi_batch: 32,
            mode: Mode::Normal,
            contrastive: ContrastiveConfig::default(),
            semi: SemiConfig::default(),
            detector: DetectorConfig::default(),
            optimizer: OptimizerConfig::default(),
            dual_network: true,
            confidence_penalty_weight: 0.0,
            architecture: None,
            eval: EvalSettings::default(),
            representation_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_batch < 2 || self.warmup_batch < 2 || self.semi_batch < 2 {
            return Err(Error::invalid("batch sizes must be at least 2"));
        }
        if self.iterations == Some(0) {
            return Err(Error::invalid("iterations must be positive"));
        }
        if !(self.confidence_penalty_weight >= 0.0) {
            return Err(Error::invalid("confidence_penalty_weight must be nonnegative"));
        }
        let d = &self.detector;
        if !(d.threshold > 0.0 && d.threshold < 1.0) || !(d.partition_threshold > 0.0 && d.partition_threshold < 1.0) {
            return Err(Error::invalid("detector thresholds must lie in (0,1)"));
        }
        if d.max_subset_size == 0 {
            return Err(Error::invalid("max_subset_size must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(o.pretrain_learning_rate > 0.0) || !(o.decay_factor > 0.0) {
            return Err(Error::invalid("learning rates and decay factor must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0,1) and weight decay nonnegative"));
        }
        if self.eval.knn_k == 0 || self.eval.alignment_pairs == 0 || !(self.eval.alignment_beta > 0.0) {
            return Err(Error::invalid("eval settings must be positive"));
        }
        self.contrastive.validate()?;
        self.semi.validate()?;
        if let Some(a) = &self.architecture {
            a.validate()?;
        }
        Ok(())
    }

    pub fn num_nets(&self) -> usize {
        if self.dual_network {
            2
        } else {
            1
        }
    }

    pub fn architecture_for(&self, ds: &NoisyDataset) -> Result<Architecture> {
        let arch = self
            .architecture
            .clone()
            .unwrap_or_else(|| Architecture::desk(ds.dim(), ds.num_classes));
        if arch.input_dim != ds.dim() || arch.num_classes != ds.num_classes {
            return Err(Error::invalid(format!(
                "architecture expects {} features and {} classes, dataset has {} and {}",
                arch.input_dim,
                arch.num_classes,
                ds.dim(),
                ds.num_classes
            )));
        }
        Ok(arch)
    }

    fn training_lr(&self, semi_epoch: usize) -> f64 {
        match self.optimizer.decay_epoch {
            Some(e) if semi_epoch >= e => self.optimizer.learning_rate / self.optimizer.decay_factor,
            _ => self.optimizer.learning_rate,
        }
    }
}

/// Everything needed to continue a run at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub pretrain_done: usize,
    pub warmup_done: usize,
    pub semi_done: usize,
    pub nets: Vec<ModelParams>,
    pub optimizers: Vec<OptimizerState>,
    /// Split each network trained on in the latest stage-two epoch.
    pub splits: Vec<SplitResult>,
    pub partition: Option<ClassPartition>,
    pub history: Vec<MetricsReport>,
    pub finished: bool,
}

impl RunState {
    pub fn init(ds: &NoisyDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture_for(ds)?;
        let nets = (0..cfg.num_nets())
            .map(|k| ModelParams::init_seeded(&arch, derive_seed(cfg.seed, &[TAG_INIT, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        let lr = if cfg.pretrain_epochs > 0 {
            cfg.optimizer.pretrain_learning_rate
        } else {
            cfg.optimizer.learning_rate
        };
        let optimizers = nets
            .iter()
            .map(|n| OptimizerState::new(n, lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pretrain_done: 0,
            warmup_done: 0,
            semi_done: 0,
            nets,
            optimizers,
            splits: Vec::new(),
            partition: None,
            history: Vec::new(),
            finished: false,
        })
    }

    pub fn net_refs(&self) -> Vec<&ModelParams> {
        self.nets.iter().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Cycles through shuffled copies of an index set.
struct Sampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            pool,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn draw(&mut self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn step(
    net: &mut ModelParams,
    opt: &mut OptimizerState,
    tape: &mut Tape,
    vars: &ModelVars,
    loss: Var,
    groups: ParamGroups,
) -> Result<()> {
    if !tape.value(loss).is_finite() {
        return Err(Error::Domain {
            op: "train",
            msg: "loss is not finite".into(),
        });
    }
    tape.backward(loss)?;
    let grads = vars.gradients(tape);
    sgd_step(net, opt, &grads, groups)
}

#[derive(Default)]
struct LossLog(BTreeMap<String, (f64, usize)>);

impl LossLog {
    fn add(&mut self, terms: &LossTerms, tape: &Tape) {
        for &(name, v) in &terms.parts {
            let e = self.0.entry(name.to_string()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let e = self.0.entry("total".to_string()).or_insert((0.0, 0));
        e.0 += tape.value(terms.total).item();
        e.1 += 1;
    }

    fn means(self) -> BTreeMap<String, f64> {
        self.0.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

/// Mean cross-entropy against hard labels, plus `penalty * mean sum_c p log p`.
pub fn warmup_loss(tape: &mut Tape, vars: &ModelVars, x: &Tensor, labels: &[usize], penalty: f64) -> Result<LossTerms> {
    let (n, _) = x.dims2();
    let xv = tape.constant(x.clone());
    let z = vars.encode(tape, xv)?;
    let logits = vars.logits(tape, z)?;
    let logp = tape.log_softmax_rows(logits)?;
    let c = tape.value(logp).cols();
    let mut pick = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        pick[i * c + y] = -1.0 / n as f64;
    }
    let ce = tape.masked_sum(logp, Tensor::new(vec![n, c], pick)?)?;
    let mut terms = vec![("ce", 1.0, ce)];
    if penalty > 0.0 {
        let p = tape.softmax_rows(logits)?;
        let plogp = tape.mul(p, logp)?;
        let s = tape.sum(plogp)?;
        let neg_entropy = tape.scale(s, 1.0 / n as f64)?;
        terms.push(("penalty", penalty, neg_entropy));
    }
    let total = tape
        .weighted_sum(&terms.iter().map(|&(_, w, v)| (w, v)).collect::<Vec<_>>())?
        .expect("ce present");
    Ok(LossTerms {
        total,
        parts: terms.iter().map(|&(name, _, v)| (name, tape.value(v).item())).collect(),
    })
}

/// One pass of cross-entropy training over shuffled batches with weak augmentation.
#[allow(clippy::too_many_arguments)]
fn ce_epoch(
    net: &mut ModelParams,
    opt: &mut OptimizerState,
    ds: &NoisyDataset,
    batch: usize,
    aug: &AugmentationSpec,
    penalty: f64,
    groups: ParamGroups,
    rng: &mut Rng,
) -> Result<BTreeMap<String, f64>> {
    let labels = ds.noisy_labels();
    let mut log = LossLog::default();
    for idx in shuffled_batches(ds.len(), batch, rng) {
        let x = augment_rows(&ds.features_of(&idx), aug, rng);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let vars = net.attach(&mut tape);
        let terms = warmup_loss(&mut tape, &vars, &x, &y, penalty)?;
        log.add(&terms, &tape);
        step(net, opt, &mut tape, &vars, terms.total, groups)?;
    }
    Ok(log.means())
}

/// Label-free contrastive epoch over batches of `2 * batch` samples.
pub fn pretrain_epoch(
    net: &mut ModelParams,
    opt: &mut OptimizerState,
    ds: &NoisyDataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<BTreeMap<String, f64>> {
    let size = 2 * cfg.pretrain_batch;
    if ds.len() < size {
        return Err(Error::invalid(format!(
            "pretraining needs at least {size} samples, dataset has {}",
            ds.len()
        )));
    }
    let strong = AugmentationSpec::strong(ds.feature_std());
    let mut log = LossLog::default();
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    for chunk in idx.chunks_exact(size) {
        let x = ds.features_of(chunk);
        let v1 = augment_rows(&x, &strong, rng);
        let v2 = augment_rows(&x, &strong, rng);
        let mix = build_mix_pairs(&v1, &v2, cfg.contrastive.mix_alpha, rng)?;
        let mut tape = Tape::new();
        let vars = net.attach(&mut tape);
        let terms = pretrain_loss(&mut tape, &vars, &v1, &v2, &mix, &cfg.contrastive)?;
        log.add(&terms, &tape);
        step(net, opt, &mut tape, &vars, terms.total, ParamGroups::ENCODER_PROJECTOR)?;
    }
    Ok(log.means())
}

/// Splits the training set by fitting the detector to `net`'s per-sample
/// losses. One-sided splits fall back to everything clean.
pub fn detect(net: &[&ModelParams], ds: &NoisyDataset, cfg: &DetectorConfig) -> Result<SplitResult> {
    let probs = ensemble_proba(net, &ds.features())?;
    let losses = per_sample_ce(&probs, &ds.noisy_labels())?;
    let fit = fit_gmm_em(&losses, cfg.em)?;
    let split = SplitResult::from_probs(fit.clean_prob, cfg.threshold)?;
    if split.clean.len() < 2 || split.noisy.is_empty() {
        log::warn!(
            "one-sided split ({} clean, {} noisy); treating every sample as clean",
            split.clean.len(),
            split.noisy.len()
        );
        return Ok(SplitResult::all_clean(ds.len(), cfg.threshold));
    }
    Ok(split)
}

struct SemiStep<'a> {
    ds: &'a NoisyDataset,
    cfg: &'a TrainConfig,
    labels: Vec<usize>,
    prior: Vec<f64>,
    weak: AugmentationSpec,
    strong: AugmentationSpec,
}

impl SemiStep<'_> {
    /// Refined, sharpened targets for a labeled batch.
    fn labeled_targets(
        &self,
        net: &ModelParams,
        x: &Tensor,
        idx: &[usize],
        split: &SplitResult,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let s = &self.cfg.semi;
        let guess = co_guess(&[net], x, s.guesses, &self.weak, rng)?;
        let y: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let w: Vec<f64> = idx.iter().map(|&i| split.clean_prob[i]).collect();
        sharpen_rows(&refine_rows(&y, &guess, &w)?, s.sharpen_temperature)
    }

    #[allow(clippy::too_many_arguments)]
    fn iteration(
        &self,
        net: &mut ModelParams,
        opt: &mut OptimizerState,
        peers: &[&ModelParams],
        split: &SplitResult,
        partition: Option<&ClassPartition>,
        clean: &mut Sampler,
        noisy: Option<&mut Sampler>,
        rng: &mut Rng,
        pair_rng: &mut Rng,
        log: &mut LossLog,
    ) -> Result<()> {
        let cfg = self.cfg;
        let size = 2 * cfg.semi_batch;
        let xi = clean.draw(size, rng);
        let x = self.ds.features_of(&xi);
        let y_hat = self.labeled_targets(net, &x, &xi, split, rng)?;
        let (u, p_hat) = match noisy {
            Some(sampler) => {
                let ui = sampler.draw(size, rng);
                let u = self.ds.features_of(&ui);
                let mut models: Vec<&ModelParams> = vec![&*net];
                models.extend(peers);
                let guess = co_guess(&models, &u, cfg.semi.guesses, &self.weak, rng)?;
                let p = sharpen_rows(&guess, cfg.semi.sharpen_temperature)?;
                (u, p)
            }
            None => {
                // no noisy part: mix with a second labeled batch
                let ui = clean.draw(size, rng);
                let u = self.ds.features_of(&ui);
                let p = self.labeled_targets(net, &u, &ui, split, rng)?;
                (u, p)
            }
        };
        let xs = augment_rows(&x, &self.strong, rng);
        let us = augment_rows(&u, &self.strong, rng);
        let mm: MixMatchBatch = mixmatch(&xs, &y_hat, &us, &p_hat, cfg.semi.mix_alpha, rng)?;

        let v1 = augment_rows(&x, &self.strong, rng);
        let v2 = augment_rows(&x, &self.strong, rng);
        let mix = build_mix_pairs(&v1, &v2, cfg.contrastive.mix_alpha, rng)?;
        let y: Vec<usize> = xi.iter().map(|&i| self.labels[i]).collect();

        let mut tape = Tape::new();
        let vars = net.attach(&mut tape);
        let nc = noise_corrector_loss(
            &mut tape,
            &vars,
            &mm,
            cfg.semi.unlabeled_weight,
            cfg.semi.prior_weight,
            &self.prior,
        )?;
        let batch = CleanBatch {
            view1: &v1,
            view2: &v2,
            labels: &y,
            mix: &mix,
        };
        let cl = clplus_loss(
            &mut tape,
            &vars,
            &batch,
            &cfg.contrastive,
            cfg.mode,
            partition,
            pair_rng,
        )?;
        let total = tape.add(nc.total, cl.total)?;
        let mut parts = nc.parts;
        parts.extend(cl.parts);
        log.add(&LossTerms { total, parts }, &tape);
        step(net, opt, &mut tape, &vars, total, ParamGroups::ALL)
    }
}

fn epoch_report(stage: &str, epoch: usize, state: &RunState, test: Option<&NoisyDataset>) -> Result<MetricsReport> {
    let test_accuracy = match test {
        Some(t) => Some(test_accuracy(&state.net_refs(), &t.features(), &t.true_labels())?),
        None => None,
    };
    Ok(MetricsReport {
        stage: stage.to_string(),
        epoch,
        test_accuracy,
        ..Default::default()
    })
}

/// Drives a run over a training set and an optional clean test set.
pub struct Pipeline<'a> {
    pub train: &'a NoisyDataset,
    pub test: Option<&'a NoisyDataset>,
    pub cfg: &'a TrainConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(train: &'a NoisyDataset, test: Option<&'a NoisyDataset>, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.architecture_for(train)?;
        if let Some(t) = test {
            if t.dim() != train.dim() || t.num_classes != train.num_classes {
                return Err(Error::invalid("test set does not match the training set's shape"));
            }
        }
        if cfg.mode == Mode::Asym && cfg.semi_epochs > 0 && train.num_classes < 2 {
            return Err(Error::invalid("asym mode needs at least two classes"));
        }
        Ok(Self { train, test, cfg })
    }

    pub fn initial_state(&self) -> Result<RunState> {
        RunState::init(self.train, self.cfg)
    }

    pub fn run(&self) -> Result<RunState> {
        self.resume(self.initial_state()?, |_, _| Ok(()))
    }

    /// Continues from `state`; `on_epoch` sees the state and its new record
    /// after every epoch and after the final evaluation.
    pub fn resume(
        &self,
        mut state: RunState,
        mut on_epoch: impl FnMut(&RunState, &MetricsReport) -> Result<()>,
    ) -> Result<RunState> {
        let cfg = self.cfg;
        if state.nets.len() != cfg.num_nets() {
            return Err(Error::invalid(format!(
                "checkpoint has {} networks, config expects {}",
                state.nets.len(),
                cfg.num_nets()
            )));
        }
        let arch = cfg.architecture_for(self.train)?;
        for n in &state.nets {
            n.check_arch(&arch)?;
        }
        if state.pretrain_done > cfg.pretrain_epochs
            || state.warmup_done > cfg.warmup_epochs
            || state.semi_done > cfg.semi_epochs
        {
            return Err(Error::invalid("checkpoint is further along than the config allows"));
        }
        while state.pretrain_done < cfg.pretrain_epochs {
            let e = state.pretrain_done;
            self.pretrain_step(&mut state)
                .map_err(|err| err.context(format!("pretraining epoch {e}")))?;
            self.emit(&mut state, &mut on_epoch)?;
        }
        while state.warmup_done < cfg.warmup_epochs {
            let e = state.warmup_done;
            self.warmup_step(&mut state)
                .map_err(|err| err.context(format!("warm-up epoch {e}")))?;
            self.emit(&mut state, &mut on_epoch)?;
        }
        while state.semi_done < cfg.semi_epochs {
            let e = state.semi_done;
            self.semi_step(&mut state)
                .map_err(|err| err.context(format!("stage-two epoch {e}")))?;
            self.emit(&mut state, &mut on_epoch)?;
        }
        if !state.finished {
            let report = self.final_report(&state)?;
            state.history.push(report);
            state.finished = true;
            self.emit(&mut state, &mut on_epoch)?;
        }
        Ok(state)
    }

    fn emit(
        &self,
        state: &mut RunState,
        on_epoch: &mut impl FnMut(&RunState, &MetricsReport) -> Result<()>,
    ) -> Result<()> {
        let last = state.history.last().cloned().expect("a record per epoch");
        on_epoch(state, &last)
    }

    fn with_representation(&self, state: &RunState, report: &mut MetricsReport, epoch_index: usize) -> Result<()> {
        let every = self.cfg.representation_every;
        if let (Some(test), true) = (self.test, every > 0 && (epoch_index + 1).is_multiple_of(every)) {
            let mut rng = derived(self.cfg.seed, &[TAG_EVAL, state.history.len() as u64]);
            report.representation = Some(representation_report(
                &state.nets[0],
                &self.train.features(),
                &self.train.true_labels(),
                &test.features(),
                &test.true_labels(),
                &self.cfg.eval,
                &mut rng,
            )?);
        }
        Ok(())
    }

    fn pretrain_step(&self, state: &mut RunState) -> Result<()> {
        let cfg = self.cfg;
        let e = state.pretrain_done;
        let mut rng = derived(cfg.seed, &[TAG_PRETRAIN, 0, e as u64]);
        let losses = pretrain_epoch(&mut state.nets[0], &mut state.optimizers[0], self.train, cfg, &mut rng)?;
        state.pretrain_done += 1;
        if state.pretrain_done == cfg.pretrain_epochs {
            // later networks share the pretrained encoder and projector
            let (first, rest) = state.nets.split_first_mut().expect("at least one net");
            for net in rest {
                net.encoder = first.encoder.clone();
                net.projector = first.projector.clone();
            }
            let o = &cfg.optimizer;
            state.optimizers = state
                .nets
                .iter()
                .map(|n| OptimizerState::new(n, o.learning_rate, o.momentum, o.weight_decay))
                .collect::<Result<Vec<_>>>()?;
        }
        let mut report = epoch_report("pretrain", e, state, None)?;
        report.losses = losses;
        self.with_representation(state, &mut report, e)?;
        state.history.push(report);
        Ok(())
    }

    fn warmup_step(&self, state: &mut RunState) -> Result<()> {
        let cfg = self.cfg;
        let e = state.warmup_done;
        let weak = AugmentationSpec::weak(self.train.feature_std());
        let mut losses = LossLog::default();
        for k in 0..state.nets.len() {
            let mut rng = derived(cfg.seed, &[TAG_WARMUP, k as u64, e as u64]);
            let (net, opt) = (&mut state.nets[k], &mut state.optimizers[k]);
            let m = ce_epoch(
                net,
                opt,
                self.train,
                cfg.warmup_batch,
                &weak,
                cfg.confidence_penalty_weight,
                ParamGroups::ENCODER_CLASSIFIER,
                &mut rng,
            )?;
            for (name, v) in m {
                let entry = losses.0.entry(name).or_insert((0.0, 0));
                entry.0 += v;
                entry.1 += 1;
            }
        }
        state.warmup_done += 1;
        let mut report = epoch_report("warmup", e, state, self.test)?;
        report.losses = losses.means();
        self.with_representation(state, &mut report, e)?;
        state.history.push(report);
        Ok(())
    }

    fn semi_step(&self, state: &mut RunState) -> Result<()> {
        let cfg = self.cfg;
        let ds = self.train;
        let e = state.semi_done;
        let lr = cfg.training_lr(e);
        state.optimizers.iter_mut().for_each(|o| o.learning_rate = lr);

        // each network trains on the split found by the other one
        let own: Vec<SplitResult> = state
            .nets
            .iter()
            .map(|n| detect(&[n], ds, &cfg.detector))
            .collect::<Result<Vec<_>>>()?;
        let splits: Vec<SplitResult> = (0..own.len()).map(|k| own[(k + 1) % own.len()].clone()).collect();

        let partition = match cfg.mode {
            Mode::Asym => {
                let probs = ensemble_proba(&state.net_refs(), &ds.features())?;
                let p = infer_partition(
                    &probs,
                    cfg.detector.partition_threshold,
                    cfg.detector.max_subset_size,
                    cfg.detector.recording,
                )?;
                log::debug!("stage-two epoch {e}: inferred partition {p}");
                Some(p)
            }
            Mode::Normal => None,
        };

        let iterations = cfg
            .iterations
            .unwrap_or_else(|| (ds.len() / (4 * cfg.semi_batch)).max(1));
        let runner = SemiStep {
            ds,
            cfg,
            labels: ds.noisy_labels(),
            prior: cfg.semi.prior.clone().unwrap_or_else(|| ds.prior.clone()),
            weak: AugmentationSpec::weak(ds.feature_std()),
            strong: AugmentationSpec::strong(ds.feature_std()),
        };
        let mut log = LossLog::default();
        for k in 0..state.nets.len() {
            let mut rng = derived(cfg.seed, &[TAG_SEMI, k as u64, e as u64]);
            // within-subset pairing has its own stream so toggling it leaves other draws intact
            let mut pair_rng = derived(cfg.seed, &[TAG_SEMI, k as u64, e as u64, TAG_ASYM_PAIRS]);
            let split = &splits[k];
            let mut clean = Sampler::new(split.clean.clone());
            let mut noisy = (!split.noisy.is_empty()).then(|| Sampler::new(split.noisy.clone()));
            let (before, rest) = state.nets.split_at_mut(k);
            let (net, after) = rest.split_first_mut().expect("k in range");
            let peers: Vec<&ModelParams> = before.iter().chain(after.iter()).collect();
            for it in 0..iterations {
                runner
                    .iteration(
                        net,
                        &mut state.optimizers[k],
                        &peers,
                        split,
                        partition.as_ref(),
                        &mut clean,
                        noisy.as_mut(),
                        &mut rng,
                        &mut pair_rng,
                        &mut log,
                    )
                    .map_err(|err| err.context(format!("network {k}, iteration {it}")))?;
            }
        }
        state.semi_done += 1;
        let mut report = epoch_report("semi", e, state, self.test)?;
        report.detection = Some(detection_quality(&splits[0], &ds.noise_mask())?);
        report.losses = log.means();
        report.partition = partition.clone();
        self.with_representation(state, &mut report, e)?;
        state.splits = splits;
        state.partition = partition;
        state.history.push(report);
        Ok(())
    }

    /// Test accuracy, detector quality of a fresh split and representation
    /// diagnostics for the finished networks.
    pub fn final_report(&self, state: &RunState) -> Result<MetricsReport> {
        let mut report = epoch_report("final", 0, state, self.test)?;
        let split = detect(&state.net_refs(), self.train, &self.cfg.detector)?;
        report.detection = Some(detection_quality(&split, &self.train.noise_mask())?);
        if let Some(test) = self.test {
            let mut rng = derived(self.cfg.seed, &[TAG_EVAL, u64::MAX]);
            report.representation = Some(representation_report(
                &state.nets[0],
                &self.train.features(),
                &self.train.true_labels(),
                &test.features(),
                &test.true_labels(),
                &self.cfg.eval,
                &mut rng,
            )?);
        }
        Ok(report)
    }
}

/// Cross-entropy training of one freshly initialized network on the noisy
/// labels for `epochs` epochs, without pretraining.
/// Returns the network and its per-epoch test accuracy.
pub fn train_ce_baseline(
    train: &NoisyDataset,
    test: Option<&NoisyDataset>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<(ModelParams, Vec<MetricsReport>)> {
    cfg.validate()?;
    let arch = cfg.architecture_for(train)?;
    let mut net = ModelParams::init_seeded(&arch, derive_seed(cfg.seed, &[TAG_BASELINE]))?;
    let o = &cfg.optimizer;
    let mut opt = OptimizerState::new(&net, o.learning_rate, o.momentum, o.weight_decay)?;
    let weak = AugmentationSpec::weak(train.feature_std());
    let mut history = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut rng = derived(cfg.seed, &[TAG_BASELINE, e as u64]);
        let losses = ce_epoch(
            &mut net,
            &mut opt,
            train,
            cfg.warmup_batch,
            &weak,
            0.0,
            ParamGroups::ENCODER_CLASSIFIER,
            &mut rng,
        )
        .map_err(|err| err.context(format!("baseline epoch {e}")))?;
        let acc = match test {
            Some(t) => Some(test_accuracy(&[&net], &t.features(), &t.true_labels())?),
            None => None,
        };
        history.push(MetricsReport {
            stage: "baseline".into(),
            epoch: e,
            test_accuracy: acc,
            losses,
            ..Default::default()
        });
    }
    Ok((net, history))
}
