//! Central finite differences against the tape's backward pass. The numeric
//! side only ever reads forward values from fresh tapes.

use chimera_core::contrastive::{
    build_mix_pairs, clplus_loss, info_nce, mixclr_loss, nt_xent, pretrain_loss, project_batch, supcl, supcl_batch,
    CleanBatch, ContrastiveConfig, Mode, NegativeConvention,
};
use chimera_core::data::ClassPartition;
use chimera_core::model::{Architecture, ModelParams, ModelVars};
use chimera_core::pipeline::warmup_loss;
use chimera_core::rng::{derived, seeded, Rng};
use chimera_core::semi::{
    diffusion_loss_reference, draw_mix_weights, mixmatch_with, noise_corrector_loss, prior_reg, semi_losses,
};
use chimera_core::{Result, Tape, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub const INSTANCES: u64 = 20;
const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared absolutely.
const FLOOR: f64 = 1e-4;
const COORDS_PER_INSTANCE: usize = 40;

pub struct Outcome {
    pub name: String,
    pub instances: u64,
    pub worst: f64,
}

pub type Group = (&'static str, fn(&mut Vec<Outcome>));

pub const GROUPS: [Group; 8] = [
    ("elementwise_and_row_ops", elementwise_and_row_ops),
    ("binary_ops", binary_ops),
    ("single_anchor_losses", single_anchor_losses),
    ("batch_contrastive_losses", batch_contrastive_losses),
    ("warmup_loss_gradients", warmup_loss_gradients),
    ("pretraining_loss_gradients", pretraining_loss_gradients),
    ("stage_two_contrastive_gradients", stage_two_contrastive_gradients),
    ("semi_supervised_gradients", semi_supervised_gradients),
];

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap()
}

fn simplex_rows(n: usize, c: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![n, c], data).unwrap()
}

/// Checks d loss / d inputs for a function of leaf tensors.
fn check_inputs(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        for j in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[j], numeric));
        }
    }
    worst
}

/// Checks d loss / d parameters on a random subset of coordinates.
fn check_params(instance: u64, params: &ModelParams, f: impl Fn(&mut Tape, &ModelVars) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape);
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars.gradients(&tape);
    let eval = |p: &ModelParams| {
        let mut t = Tape::new();
        let v = p.attach(&mut t);
        let l = f(&mut t, &v).unwrap();
        t.value(l).item()
    };
    let sizes: Vec<usize> = params.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut rng = derived(instance, &[0xFD]);
    let mut worst: f64 = 0.0;
    for _ in 0..COORDS_PER_INSTANCE {
        let k = rng.random_range(0..sizes.len());
        let j = rng.random_range(0..sizes[k]);
        let mut plus = params.clone();
        plus.params_mut()[k].data_mut()[j] += STEP;
        let mut minus = params.clone();
        minus.params_mut()[k].data_mut()[j] -= STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        let analytic = grads.0[k].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

fn tiny_arch() -> Architecture {
    Architecture {
        input_dim: 4,
        encoder_dims: vec![6, 5],
        projector_dims: vec![5, 3],
        num_classes: 3,
    }
}

fn run_inputs(
    out: &mut Vec<Outcome>,
    name: &str,
    make: impl Fn(&mut Rng) -> Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
) {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut rng = derived(i, &[0x1A]);
        worst = worst.max(check_inputs(make(&mut rng), f));
    }
    out.push(Outcome {
        name: name.to_string(),
        instances: INSTANCES,
        worst,
    });
}

fn run_params(out: &mut Vec<Outcome>, name: &str, f: impl Fn(&mut Tape, &ModelVars, &mut Rng) -> Result<Var>) {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let params = ModelParams::init_seeded(&tiny_arch(), 1000 + i).unwrap();
        let seed = derived(i, &[0x2B]).random::<u64>();
        worst = worst.max(check_params(i, &params, |t, v| f(t, v, &mut seeded(seed))));
    }
    out.push(Outcome {
        name: name.to_string(),
        instances: INSTANCES,
        worst,
    });
}

fn weighted_sum_of(tape: &mut Tape, v: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = normal(&shape, &mut seeded(rng_seed));
    tape.masked_sum(v, w)
}

pub fn elementwise_and_row_ops(out: &mut Vec<Outcome>) {
    let shape = |r: &mut Rng| vec![normal(&[3, 4], r)];
    run_inputs(out, "relu", shape, |t, v| {
        let y = t.relu(v[0])?;
        weighted_sum_of(t, y, 1)
    });
    run_inputs(out, "exp", shape, |t, v| {
        let y = t.exp(v[0])?;
        weighted_sum_of(t, y, 2)
    });
    run_inputs(
        out,
        "log",
        |r| vec![positive(&[3, 4], r)],
        |t, v| {
            let y = t.log(v[0])?;
            weighted_sum_of(t, y, 3)
        },
    );
    run_inputs(out, "softmax_rows", shape, |t, v| {
        let y = t.softmax_rows(v[0])?;
        weighted_sum_of(t, y, 4)
    });
    run_inputs(out, "log_softmax_rows", shape, |t, v| {
        let y = t.log_softmax_rows(v[0])?;
        weighted_sum_of(t, y, 5)
    });
    run_inputs(out, "l2_normalize_rows", shape, |t, v| {
        let y = t.l2_normalize_rows(v[0])?;
        weighted_sum_of(t, y, 6)
    });
    run_inputs(out, "square_mean_sum", shape, |t, v| {
        let s = t.square(v[0])?;
        let m = t.mean(s)?;
        let e = t.exp(v[0])?;
        let total = t.sum(e)?;
        let scaled = t.scale(total, 0.3)?;
        t.add(m, scaled)
    });
    run_inputs(out, "transpose", shape, |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum_of(t, y, 7)
    });
    run_inputs(out, "select_and_concat", shape, |t, v| {
        let a = t.select_rows(v[0], vec![2, 0, 2])?;
        let b = t.concat_rows(&[a, v[0]])?;
        weighted_sum_of(t, b, 8)
    });
}

pub fn binary_ops(out: &mut Vec<Outcome>) {
    let pair = |r: &mut Rng| vec![normal(&[3, 4], r), normal(&[3, 4], r)];
    run_inputs(out, "add", pair, |t, v| {
        let y = t.add(v[0], v[1])?;
        let y = t.square(y)?;
        weighted_sum_of(t, y, 9)
    });
    run_inputs(out, "sub", pair, |t, v| {
        let y = t.sub(v[0], v[1])?;
        let y = t.square(y)?;
        weighted_sum_of(t, y, 10)
    });
    run_inputs(out, "mul", pair, |t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum_of(t, y, 11)
    });
    run_inputs(
        out,
        "matmul",
        |r| vec![normal(&[3, 4], r), normal(&[4, 2], r)],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum_of(t, y, 12)
        },
    );
    run_inputs(
        out,
        "add_row_broadcast",
        |r| vec![normal(&[3, 4], r), normal(&[4], r)],
        |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.square(y)?;
            weighted_sum_of(t, y, 13)
        },
    );
}

fn unit_rows(t: &mut Tape, v: Var) -> Result<Var> {
    t.l2_normalize_rows(v)
}

pub fn single_anchor_losses(out: &mut Vec<Outcome>) {
    run_inputs(
        out,
        "info_nce",
        |r| vec![normal(&[1, 3], r), normal(&[1, 3], r), normal(&[4, 3], r)],
        |t, v| {
            let a = unit_rows(t, v[0])?;
            let p = unit_rows(t, v[1])?;
            let n = unit_rows(t, v[2])?;
            info_nce(t, a, p, &[n], 0.5)
        },
    );
    run_inputs(
        out,
        "supcl",
        |r| vec![normal(&[1, 3], r), normal(&[3, 3], r), normal(&[4, 3], r)],
        |t, v| {
            let a = unit_rows(t, v[0])?;
            let p = unit_rows(t, v[1])?;
            let n = unit_rows(t, v[2])?;
            supcl(t, a, p, &[n], 0.5)
        },
    );
}

pub fn batch_contrastive_losses(out: &mut Vec<Outcome>) {
    let views = |r: &mut Rng| vec![normal(&[5, 3], r), normal(&[5, 3], r)];
    for (name, conv) in [
        ("nt_xent_symmetric", NegativeConvention::Symmetric),
        ("nt_xent_first_view", NegativeConvention::FirstView),
    ] {
        run_inputs(out, name, views, move |t, v| {
            let a = unit_rows(t, v[0])?;
            let b = unit_rows(t, v[1])?;
            nt_xent(t, a, b, 0.5, conv)
        });
    }
    run_inputs(out, "mixclr", views, |t, v| {
        let a = unit_rows(t, v[0])?;
        let b = unit_rows(t, v[1])?;
        mixclr_loss(t, a, b, 0.5, NegativeConvention::Symmetric)
    });
    run_inputs(
        out,
        "supcl_batch",
        |r| vec![normal(&[6, 3], r)],
        |t, v| {
            let a = unit_rows(t, v[0])?;
            supcl_batch(t, a, &[0, 1, 0, 2, 1, 0], 0.5)
        },
    );
}

fn batch(rng: &mut Rng, n: usize) -> Tensor {
    normal(&[n, 4], rng)
}

pub fn warmup_loss_gradients(out: &mut Vec<Outcome>) {
    run_params(out, "warmup_ce", |t, v, r| {
        let x = batch(r, 6);
        warmup_loss(t, v, &x, &[0, 1, 2, 2, 1, 0], 0.0).map(|l| l.total)
    });
    run_params(out, "warmup_ce_with_penalty", |t, v, r| {
        let x = batch(r, 6);
        warmup_loss(t, v, &x, &[0, 1, 2, 2, 1, 0], 0.7).map(|l| l.total)
    });
}

pub fn pretraining_loss_gradients(out: &mut Vec<Outcome>) {
    run_params(out, "pretrain", |t, v, r| {
        let (a, b) = (batch(r, 6), batch(r, 6));
        let mix = build_mix_pairs(&a, &b, 2.0, r)?;
        pretrain_loss(t, v, &a, &b, &mix, &ContrastiveConfig::default()).map(|l| l.total)
    });
    run_params(out, "projected_mixclr", |t, v, r| {
        let (a, b) = (batch(r, 6), batch(r, 6));
        let mix = build_mix_pairs(&a, &b, 2.0, r)?;
        let m1 = project_batch(t, v, &mix.view1)?;
        let m2 = project_batch(t, v, &mix.view2)?;
        mixclr_loss(t, m1, m2, 0.5, NegativeConvention::Symmetric)
    });
}

pub fn stage_two_contrastive_gradients(out: &mut Vec<Outcome>) {
    let labels = [0, 1, 0, 2, 1, 2, 0, 1];
    for (name, mode) in [("clplus_normal", Mode::Normal), ("clplus_asym", Mode::Asym)] {
        run_params(out, name, |t, v, r| {
            let (a, b) = (batch(r, 8), batch(r, 8));
            let mix = build_mix_pairs(&a, &b, 2.0, r)?;
            let part = ClassPartition::new(vec![vec![0, 1], vec![2]], 3)?;
            let cb = CleanBatch {
                view1: &a,
                view2: &b,
                labels: &labels,
                mix: &mix,
            };
            clplus_loss(t, v, &cb, &ContrastiveConfig::default(), mode, Some(&part), r).map(|l| l.total)
        });
    }
}

fn mix_batch(r: &mut Rng, n: usize) -> chimera_core::semi::MixMatchBatch {
    let (x, u) = (batch(r, n), batch(r, n));
    let (y, p) = (simplex_rows(n, 3, r), simplex_rows(n, 3, r));
    let l = draw_mix_weights(n, 4.0, r).unwrap();
    mixmatch_with(&x, &y, &u, &p, l).unwrap()
}

pub fn semi_supervised_gradients(out: &mut Vec<Outcome>) {
    run_params(out, "semi_labeled", |t, v, r| {
        let b = mix_batch(r, 5);
        semi_losses(t, v, &b).map(|s| s.labeled)
    });
    run_params(out, "semi_unlabeled", |t, v, r| {
        let b = mix_batch(r, 5);
        semi_losses(t, v, &b).map(|s| s.unlabeled)
    });
    run_params(out, "prior_reg_on_model", |t, v, r| {
        let b = mix_batch(r, 5);
        let s = semi_losses(t, v, &b)?;
        prior_reg(t, s.probs, &[0.2, 0.3, 0.5])
    });
    run_params(out, "noise_corrector", |t, v, r| {
        let b = mix_batch(r, 5);
        noise_corrector_loss(t, v, &b, 25.0, 1.0, &[1.0 / 3.0; 3]).map(|l| l.total)
    });
    run_params(out, "diffusion_reference", |t, v, r| {
        let (x, u) = (batch(r, 4), batch(r, 4));
        let p = simplex_rows(4, 3, r);
        let l = draw_mix_weights(4, 4.0, r)?;
        diffusion_loss_reference(t, v, &x, &[0, 2, 1, 1], &u, &p, &l, 3.0)
    });
    run_inputs(
        out,
        "prior_reg",
        |r| vec![simplex_rows(6, 4, r)],
        |t, v| prior_reg(t, v[0], &[0.1, 0.2, 0.3, 0.4]),
    );
}
