//! The three-part model: encoder, hypersphere projector and linear classifier,
//! plus momentum SGD and the text checkpoint format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::{forward_op, Op, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &str = "chimera-params";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths. Encoder layers are joined by ReLU; the encoder output `z`
/// itself is linear. The projector applies ReLU between its layers and ends
/// with row normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub encoder_dims: Vec<usize>,
    pub projector_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// Two 64-wide encoder layers, a 64 -> 16 projector and a linear head.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            encoder_dims: vec![64, 64],
            projector_dims: vec![64, 16],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.num_classes == 0
            || self.encoder_dims.is_empty()
            || self.projector_dims.is_empty()
            || self.encoder_dims.iter().chain(&self.projector_dims).any(|&d| d == 0)
        {
            return Err(Error::invalid(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[d_in, d_out]`
    pub weight: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

impl Linear {
    fn uniform(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        let weight = Tensor::new(vec![d_in, d_out], draw(d_in * d_out)).expect("shape");
        let bias = Tensor::new(vec![d_out], draw(d_out)).expect("shape");
        Self { weight, bias }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = forward_op(&Op::MatMul, &[x, &self.weight])?;
        forward_op(&Op::Add, &[&h, &self.bias])
    }
}

/// Which parameter groups an optimizer step touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    pub encoder: bool,
    pub projector: bool,
    pub classifier: bool,
}

impl ParamGroups {
    pub const ALL: Self = Self {
        encoder: true,
        projector: true,
        classifier: true,
    };
    pub const ENCODER_PROJECTOR: Self = Self {
        encoder: true,
        projector: true,
        classifier: false,
    };
    pub const ENCODER_CLASSIFIER: Self = Self {
        encoder: true,
        projector: false,
        classifier: true,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Encoder,
    Projector,
    Classifier,
}

impl Group {
    fn selected(self, groups: ParamGroups) -> bool {
        match self {
            Group::Encoder => groups.encoder,
            Group::Projector => groups.projector,
            Group::Classifier => groups.classifier,
        }
    }
}

/// Parameters of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    arch: Architecture,
    pub encoder: Vec<Linear>,
    pub projector: Vec<Linear>,
    pub classifier: Linear,
}

impl ModelParams {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let encoder = chain(arch.input_dim, &arch.encoder_dims)
            .map(|(i, o)| Linear::uniform(i, o, rng))
            .collect();
        let projector = chain(arch.embedding_dim(), &arch.projector_dims)
            .map(|(i, o)| Linear::uniform(i, o, rng))
            .collect();
        let classifier = Linear::uniform(arch.embedding_dim(), arch.num_classes, rng);
        Ok(Self {
            arch: arch.clone(),
            encoder,
            projector,
            classifier,
        })
    }

    pub fn init_seeded(arch: &Architecture, seed: u64) -> Result<Self> {
        Self::init(arch, &mut seeded(seed))
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            encoder: chain(arch.input_dim, &arch.encoder_dims)
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
            projector: chain(arch.embedding_dim(), &arch.projector_dims)
                .map(|(i, o)| Linear::zeros(i, o))
                .collect(),
            classifier: Linear::zeros(arch.embedding_dim(), arch.num_classes),
        })
    }

    /// Same architecture, freshly initialized from `seed`.
    pub fn fresh(&self, seed: u64) -> Self {
        Self::init_seeded(&self.arch, seed).expect("architecture already validated")
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    fn layers(&self) -> impl Iterator<Item = (Group, &str, usize, &Linear)> {
        self.encoder
            .iter()
            .enumerate()
            .map(|(i, l)| (Group::Encoder, "encoder", i, l))
            .chain(
                self.projector
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (Group::Projector, "projector", i, l)),
            )
            .chain(std::iter::once((Group::Classifier, "classifier", 0, &self.classifier)))
    }

    /// Parameter names and tensors, in the canonical order used by
    /// [`Gradients`] and [`OptimizerState`].
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (_, name, i, l) in self.layers() {
            out.push((format!("{name}.{i}.weight"), &l.weight));
            out.push((format!("{name}.{i}.bias"), &l.bias));
        }
        out
    }

    fn groups(&self) -> Vec<Group> {
        self.layers().flat_map(|(g, ..)| [g, g]).collect()
    }

    /// Parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.projector.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records all parameters as trainable leaves on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> ModelVars {
        let mut leaf = |l: &Linear| (tape.param(l.weight.clone()), tape.param(l.bias.clone()));
        let encoder = self.encoder.iter().map(&mut leaf).collect();
        let projector = self.projector.iter().map(&mut leaf).collect();
        let classifier = leaf(&self.classifier);
        ModelVars {
            encoder,
            projector,
            classifier,
        }
    }

    /// Encoder output `z` without recording anything.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.encoder.len() {
                h = forward_op(&Op::Relu, &[&h])?;
            }
        }
        Ok(h)
    }

    /// Unit-norm projected features `f(x)`.
    pub fn project_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.embed(x)?;
        for (i, layer) in self.projector.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.projector.len() {
                h = forward_op(&Op::Relu, &[&h])?;
            }
        }
        forward_op(&Op::L2NormalizeRows, &[&h])
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.embed(x)?)
    }

    /// Class probability rows.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        forward_op(&Op::SoftmaxRows, &[&self.logits(x)?])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::Shape {
                op: "encode",
                shapes: vec![x.shape().to_vec(), vec![self.arch.input_dim]],
            });
        }
        Ok(())
    }

    /// Fails with the full list of shape differences when `self` does not
    /// match `expected`.
    pub fn check_arch(&self, expected: &Architecture) -> Result<()> {
        if &self.arch == expected {
            return Ok(());
        }
        let theirs = ModelParams::zeros(expected)?;
        let mine: Vec<_> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let want: Vec<_> = theirs
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut msg = String::from("architecture mismatch:");
        for (n, s) in &mine {
            match want.iter().find(|(m, _)| m == n) {
                Some((_, w)) if w == s => {}
                Some((_, w)) => write!(msg, " {n}: checkpoint {s:?} vs expected {w:?};").unwrap(),
                None => write!(msg, " {n}: checkpoint {s:?} vs expected none;").unwrap(),
            }
        }
        for (n, w) in &want {
            if !mine.iter().any(|(m, _)| m == n) {
                write!(msg, " {n}: checkpoint none vs expected {w:?};").unwrap();
            }
        }
        Err(Error::InvalidArgument(msg))
    }

    /// Writes the versioned text checkpoint. Values use the shortest
    /// round-trip decimal form, so reading back is bit-exact.
    pub fn write_text(&self, mut w: impl Write) -> Result<()> {
        let a = &self.arch;
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(
            w,
            "arch input={} encoder={} projector={} classes={}",
            a.input_dim,
            join(&a.encoder_dims),
            join(&a.projector_dims),
            a.num_classes
        )?;
        for (name, t) in self.named_params() {
            let mut line = format!("{name} {}", join(t.shape()));
            for v in t.data() {
                write!(line, " {v:?}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };
        let (ln, header) = next("header")?;
        if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Parse {
                line: ln,
                msg: format!("bad header {header:?}"),
            });
        }
        let (ln, arch_line) = next("arch")?;
        let arch = parse_arch(&arch_line).map_err(|msg| Error::Parse { line: ln, msg })?;
        let mut params = ModelParams::zeros(&arch)?;
        let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.params_mut()) {
            let (ln, line) = next(name)?;
            let perr = |msg: String| Error::Parse { line: ln, msg };
            let mut tok = line.split_ascii_whitespace();
            if tok.next() != Some(name.as_str()) {
                return Err(perr(format!("expected tensor {name}")));
            }
            let shape = parse_list(tok.next().unwrap_or("")).map_err(perr)?;
            if shape != slot.shape() {
                return Err(perr(format!("{name}: shape {shape:?}, expected {:?}", slot.shape())));
            }
            let values = tok
                .map(|s| s.parse::<f64>().map_err(|e| format!("{name}: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(perr)?;
            *slot = Tensor::new(shape, values).map_err(|e| perr(e.to_string()))?;
        }
        Ok(params)
    }
}

fn chain<'a>(input: usize, dims: &'a [usize]) -> impl Iterator<Item = (usize, usize)> + 'a {
    std::iter::once(input)
        .chain(dims.iter().copied())
        .zip(dims.iter().copied())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad integer {t:?}: {e}")))
        .collect()
}

fn parse_arch(line: &str) -> std::result::Result<Architecture, String> {
    let mut tok = line.split_ascii_whitespace();
    if tok.next() != Some("arch") {
        return Err("expected arch line".into());
    }
    let mut field = |key: &str| -> std::result::Result<String, String> {
        let t = tok.next().ok_or(format!("missing {key}"))?;
        t.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or(format!("expected {key}=..., got {t:?}"))
    };
    let input_dim = field("input")?.parse().map_err(|e| format!("input: {e}"))?;
    let encoder_dims = parse_list(&field("encoder")?)?;
    let projector_dims = parse_list(&field("projector")?)?;
    let num_classes = field("classes")?.parse().map_err(|e| format!("classes: {e}"))?;
    Ok(Architecture {
        input_dim,
        encoder_dims,
        projector_dims,
        num_classes,
    })
}

/// Tape handles for one network's parameters.
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>,
    pub projector: Vec<(Var, Var)>,
    pub classifier: (Var, Var),
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

impl ModelVars {
    /// `z = phi(x)`
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &layer) in self.encoder.iter().enumerate() {
            h = linear(tape, h, layer)?;
            if i + 1 < self.encoder.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `f = g(z)`, rows on the unit sphere.
    pub fn project(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let mut h = z;
        for (i, &layer) in self.projector.iter().enumerate() {
            h = linear(tape, h, layer)?;
            if i + 1 < self.projector.len() {
                h = tape.relu(h)?;
            }
        }
        tape.l2_normalize_rows(h)
    }

    pub fn logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        linear(tape, z, self.classifier)
    }

    /// Probability rows `p = softmax(omega(phi(x)))`.
    pub fn classify(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.encode(tape, x)?;
        let l = self.logits(tape, z)?;
        tape.softmax_rows(l)
    }

    fn vars(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .chain(std::iter::once(&self.classifier))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Gradients after `tape.backward`, in canonical parameter order.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        Gradients(self.vars().into_iter().map(|v| tape.grad(v)).collect())
    }
}

/// Per-parameter gradients in canonical order; `None` where the backward
/// pass never reached the parameter.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Option<Tensor>>);

/// Momentum SGD with coupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "optimizer settings lr={learning_rate} momentum={momentum} weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            velocity: params
                .named_params()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`
/// for every parameter in `groups`.
pub fn sgd_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &Gradients,
    groups: ParamGroups,
) -> Result<()> {
    let names: Vec<String> = params.named_params().into_iter().map(|(n, _)| n).collect();
    let selected: Vec<bool> = params.groups().into_iter().map(|g| g.selected(groups)).collect();
    if grads.0.len() != names.len() || state.velocity.len() != names.len() {
        return Err(Error::invalid("gradient/optimizer state does not match the parameters"));
    }
    let missing: Vec<String> = names
        .iter()
        .zip(&selected)
        .zip(&grads.0)
        .filter(|((_, &sel), g)| sel && g.is_none())
        .map(|((n, _), _)| n.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGrad(missing));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (((p, v), g), sel) in params
        .params_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
        .zip(&grads.0)
        .zip(selected)
    {
        if !sel {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
