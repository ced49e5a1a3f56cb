//! Conditional velocity network and its training loops.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::{decode_bundle, encode_bundle, TOY_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::lora::{apply_direct, BaseWeights, LayerDelta, LayerSpec, LoraAdapter};
use crate::optim::{adam_step, AdamState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEmbedder};

use super::themes::{Generator, ToyDataset, Variation};

pub const POINT_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Point-set families in the pool; the base model learns their plain form.
    pub themes: Vec<Generator>,
    /// One adapter is fine-tuned per theme and variation.
    pub variations: Vec<Variation>,
    pub hidden: usize,
    pub layers: usize,
    pub c_dim: usize,
    pub samples_per_theme: usize,
    pub heldout_per_theme: usize,
    pub base_steps: usize,
    pub lora_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lora_lr: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub text: TextConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            themes: Generator::ALL.to_vec(),
            variations: Variation::ADAPTED.to_vec(),
            hidden: 64,
            layers: 4,
            c_dim: 16,
            samples_per_theme: 2048,
            heldout_per_theme: 512,
            base_steps: 3000,
            lora_steps: 800,
            batch_size: 128,
            lr: 2e-3,
            lora_lr: 3e-3,
            lora_rank: 4,
            lora_alpha: 4.0,
            text: TextConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.hidden,
            self.layers,
            self.c_dim,
            self.samples_per_theme,
            self.heldout_per_theme,
            self.batch_size,
            self.lora_rank,
        ];
        if positive.contains(&0) {
            return Err(Error::arg("toy config sizes must be positive"));
        }
        if !(self.lr > 0.0 && self.lora_lr > 0.0 && self.lora_alpha > 0.0) {
            return Err(Error::arg("toy learning rates and alpha must be positive"));
        }
        if self.variations.contains(&Variation::Plain) {
            return Err(Error::arg(
                "the plain variation is reserved for the base model",
            ));
        }
        if self.lora_rank > self.hidden.min(self.input_dim()) {
            return Err(Error::arg("lora rank exceeds the layer dimensions"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        POINT_DIM + 1 + self.c_dim
    }

    /// Names and shapes of the adaptable layers.
    pub fn catalog(&self) -> Vec<LayerSpec> {
        (0..self.layers)
            .map(|i| {
                LayerSpec::new(
                    format!("hidden.{i}"),
                    self.hidden,
                    if i == 0 {
                        self.input_dim()
                    } else {
                        self.hidden
                    },
                )
            })
            .collect()
    }
}

/// Maps a caption to the network's condition vector: the caption embedding
/// times a fixed Gaussian projection.
pub struct Conditioner {
    text: TextEmbedder,
    /// `text_dim × c_dim`
    projection: Tensor,
}

impl Conditioner {
    pub fn new(config: &ToyConfig) -> Result<Self> {
        let text = TextEmbedder::new(config.text)?;
        let mut rng = SeededRng::derive(config.text.seed, "condition-projection");
        let projection = Tensor::matrix(
            config.text.dim,
            config.c_dim,
            rng.normals(config.text.dim * config.c_dim, 1.0),
        )?;
        Ok(Self { text, projection })
    }

    pub fn text(&self) -> &TextEmbedder {
        &self.text
    }

    pub fn condition(&self, caption: &str) -> Result<Vec<f64>> {
        let e = self.text.embed(caption)?;
        let row = Tensor::row_vector(e.as_slice().to_vec());
        Ok(row.matmul(&self.projection)?.into_data())
    }
}

/// Velocity network: `[x, t, c] → hidden.0 … hidden.{H-1} → head`, SiLU after
/// every hidden layer. Hidden weights are `d × k` (output × input).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `2 × hidden`
    pub head_w: Tensor,
    /// `1 × 2`
    pub head_b: Tensor,
}

pub struct ToyVars<'t> {
    pub weights: Vec<Var<'t>>,
    pub biases: Vec<Var<'t>>,
    pub head_w: Var<'t>,
    pub head_b: Var<'t>,
}

impl<'t> ToyVars<'t> {
    pub fn to_vec(&self) -> Vec<Var<'t>> {
        let mut v: Vec<Var<'t>> = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect();
        v.push(self.head_w);
        v.push(self.head_b);
        v
    }
}

/// Called after every hidden linear layer with `(layer index, layer input,
/// base output)`; returns the output to pass on.
pub type LayerHook<'h, 't> = dyn FnMut(usize, Var<'t>, Var<'t>) -> Result<Var<'t>> + 'h;

/// Anything that predicts a velocity for a batch of `[x, t, c]` rows.
pub trait VelocityModel {
    fn input_dim(&self) -> usize;

    fn velocity_var<'t>(&self, tape: &'t Tape, input: Var<'t>) -> Result<Var<'t>>;

    fn velocity(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(input.clone());
        Ok(self.velocity_var(&tape, x)?.value())
    }
}

impl ToyModel {
    pub fn init(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, "toy-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for spec in config.catalog() {
            let std = 1.0 / (spec.k as f64).sqrt();
            weights.push(Tensor::matrix(
                spec.d,
                spec.k,
                rng.normals(spec.d * spec.k, std),
            )?);
            biases.push(Tensor::zeros(&[1, spec.d]));
        }
        let head_w = Tensor::matrix(
            POINT_DIM,
            config.hidden,
            rng.normals(
                POINT_DIM * config.hidden,
                1.0 / (config.hidden as f64).sqrt(),
            ),
        )?;
        Ok(Self {
            config,
            weights,
            biases,
            head_w,
            head_b: Tensor::zeros(&[1, POINT_DIM]),
        })
    }

    pub fn catalog(&self) -> Vec<LayerSpec> {
        self.config.catalog()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.weights.len())
            .flat_map(|i| [format!("hidden.{i}.weight"), format!("hidden.{i}.bias")])
            .collect();
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> ToyVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ToyVars {
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
            head_w: leaf(&self.head_w),
            head_b: leaf(&self.head_b),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> ToyVars<'t> {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> ToyVars<'t> {
        self.bind_with(tape, false)
    }

    /// Forward pass with a hook after every hidden linear layer.
    pub fn forward_hooked<'t>(
        &self,
        input: Var<'t>,
        vars: &ToyVars<'t>,
        hook: &mut LayerHook<'_, 't>,
    ) -> Result<Var<'t>> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim() {
            return Err(Error::arg(format!(
                "toy model expects n x {} inputs, got {shape:?}",
                self.config.input_dim()
            )));
        }
        let mut h = input;
        for (i, (w, b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            let x = h.matmul_bt(*w)?.add_row(*b)?;
            h = hook(i, h, x)?.silu()?;
        }
        h.matmul_bt(vars.head_w)?.add_row(vars.head_b)
    }

    /// Hidden weights keyed by layer id.
    pub fn base_weights(&self) -> BaseWeights {
        self.catalog()
            .into_iter()
            .zip(&self.weights)
            .map(|(s, w)| (s.layer_id, w.clone()))
            .collect()
    }

    /// Copy of the model with `scale · Σ ΔW` merged into the hidden weights.
    pub fn merged(&self, adapters: &[LoraAdapter], scale: f64) -> Result<ToyModel> {
        let mut out = self.clone();
        if adapters.is_empty() {
            return Ok(out);
        }
        let merged = apply_direct(&self.base_weights(), adapters, scale)?;
        for (spec, w) in self.catalog().iter().zip(out.weights.iter_mut()) {
            *w = merged[&spec.layer_id].clone();
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({ "config": self.config });
        let named: Vec<(String, &Tensor)> = self.names().into_iter().zip(self.tensors()).collect();
        encode_bundle(TOY_MAGIC, header, &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            config: ToyConfig,
        }
        let (header, tensors) = decode_bundle(bytes, TOY_MAGIC)?;
        let header: Header =
            serde_json::from_value(header).map_err(|e| FormatError::Manifest(e.to_string()))?;
        let mut model =
            ToyModel::init(header.config, 0).map_err(|e| FormatError::Manifest(e.to_string()))?;
        let names = model.names();
        if names.len() != tensors.len() {
            return Err(FormatError::LengthMismatch("toy model tensor count".into()).into());
        }
        for ((slot, name), (got, t)) in model.tensors_mut().into_iter().zip(&names).zip(tensors) {
            if *name != got || slot.shape() != t.shape() {
                return Err(FormatError::Shape(format!(
                    "expected {name} {:?}, found {got}",
                    slot.shape()
                ))
                .into());
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            *t = t.round_to_f32();
        }
    }
}

impl VelocityModel for ToyModel {
    fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    fn velocity_var<'t>(&self, tape: &'t Tape, input: Var<'t>) -> Result<Var<'t>> {
        let vars = self.bind_frozen(tape);
        self.forward_hooked(input, &vars, &mut |_, _, x| Ok(x))
    }
}

/// `[x, t, c]` rows.
pub fn model_input(x: &Tensor, t: &[f64], c: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if x.cols() != POINT_DIM || t.len() != n || c.rows() != n {
        return Err(Error::arg("model input parts disagree on batch size"));
    }
    let width = POINT_DIM + 1 + c.cols();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.push(t[i]);
        data.extend_from_slice(c.row(i));
    }
    Tensor::matrix(n, width, data)
}

/// The same condition on every row.
pub fn repeat_rows(row: &[f64], n: usize) -> Result<Tensor> {
    Tensor::matrix(
        n,
        row.len(),
        row.iter().copied().cycle().take(n * row.len()).collect(),
    )
}

/// One flow-matching minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    /// `n × c_dim`
    pub c: Tensor,
}

impl FlowBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.x1.rows();
        if self.x0.shape() != self.x1.shape() || self.t.len() != n || self.c.rows() != n {
            return Err(Error::arg("flow batch parts disagree on size"));
        }
        if self.t.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::arg("flow batch times must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Draws `n` rows of `data` (with replacement), fresh Gaussian noise and
    /// `t ~ U(0, 1)`, all under condition `c`.
    pub fn draw(data: &Tensor, c: &[f64], n: usize, rng: &mut SeededRng) -> Result<Self> {
        if data.rows() == 0 || n == 0 {
            return Err(Error::arg("cannot draw a batch from an empty dataset"));
        }
        let rows: Vec<f64> = (0..n)
            .flat_map(|_| data.row(rng.below(data.rows())).to_vec())
            .collect();
        let x1 = Tensor::matrix(n, POINT_DIM, rows)?;
        let x0 = Tensor::matrix(n, POINT_DIM, rng.normals(n * POINT_DIM, 1.0))?;
        let t = (0..n).map(|_| rng.uniform_open()).collect();
        Ok(Self {
            x0,
            x1,
            t,
            c: repeat_rows(c, n)?,
        })
    }
}

/// `(1 − t)·x0 + t·x1`, per row.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::arg("interpolate: shapes disagree"));
    }
    if t.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::arg("interpolate: t must lie in [0, 1]"));
    }
    let mut out = x0.clone();
    for (r, &tv) in t.iter().enumerate() {
        let b = x1.row(r).to_vec();
        for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
            *o = (1.0 - tv) * *o + tv * bv;
        }
    }
    Ok(out)
}

/// Network input and regression target of a batch.
pub fn batch_io(batch: &FlowBatch) -> Result<(Tensor, Tensor)> {
    let xt = interpolate(&batch.x0, &batch.x1, &batch.t)?;
    Ok((
        model_input(&xt, &batch.t, &batch.c)?,
        batch.x1.sub(&batch.x0)?,
    ))
}

/// Batch mean of `‖v − (x1 − x0)‖²` on the tape.
pub fn flow_loss_var<'t>(velocity: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let n = target.rows() as f64;
    let t = velocity.tape().constant(target.clone());
    velocity.sub(t)?.square()?.sum()?.scale(1.0 / n)
}

/// Flow-matching loss of any velocity model on a batch.
pub fn flow_matching_loss(model: &dyn VelocityModel, batch: &FlowBatch) -> Result<f64> {
    batch.validate()?;
    let (input, target) = batch_io(batch)?;
    let v = model.velocity(&input)?;
    let diff = v.sub(&target)?;
    Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / target.rows() as f64)
}

/// Euler integration of the velocity field from `x0 ~ N(0, I)` over `t ∈ [0, 1]`.
pub fn generate(
    model: &dyn VelocityModel,
    c: &[f64],
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    if steps == 0 || n == 0 {
        return Err(Error::arg("generate needs positive steps and sample count"));
    }
    let mut rng = SeededRng::derive(seed, "generate");
    let x0 = Tensor::matrix(n, POINT_DIM, rng.normals(n * POINT_DIM, 1.0))?;
    integrate(model, x0, c, steps)
}

/// Euler integration from a given starting batch.
pub fn integrate(model: &dyn VelocityModel, x0: Tensor, c: &[f64], steps: usize) -> Result<Tensor> {
    let n = x0.rows();
    let cond = repeat_rows(c, n)?;
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for s in 0..steps {
        let t = vec![s as f64 * dt; n];
        let v = model.velocity(&model_input(&x, &t, &cond)?)?;
        x.add_scaled(&v, dt);
    }
    if !x.is_finite() {
        return Err(Error::Numeric("generated samples are not finite".into()));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

/// Trains every weight of `model` on a mixture of datasets, each under its
/// own prompt condition. Returns the loss at logging intervals.
pub fn train_base(
    model: &mut ToyModel,
    datasets: &[(&ToyDataset, Vec<f64>)],
    steps: usize,
    seed: u64,
) -> Result<Vec<StepLoss>> {
    if datasets.is_empty() {
        return Err(Error::arg("base training needs at least one dataset"));
    }
    let cfg = model.config.clone();
    let mut rng = SeededRng::derive(seed, "base-train");
    let mut adam = AdamState::new(&model.tensors(), cfg.lr);
    let mut log = Vec::new();
    let per = (cfg.batch_size / datasets.len()).max(1);
    for step in 0..steps {
        let mut parts = Vec::with_capacity(datasets.len());
        for (ds, c) in datasets {
            parts.push(FlowBatch::draw(&ds.points, c, per, &mut rng)?);
        }
        let batch = concat_batches(&parts)?;
        let (input, target) = batch_io(&batch)?;
        let tape = Tape::new();
        let vars = model.bind(&tape);
        let x = tape.constant(input);
        let v = model.forward_hooked(x, &vars, &mut |_, _, x| Ok(x))?;
        let loss = flow_loss_var(v, &target)?;
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "base loss became {lv} at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.to_vec().iter().map(|&v| grads.wrt(v)).collect();
        adam_step(&mut model.tensors_mut(), &g, &mut adam)?;
        if step % 50 == 0 || step + 1 == steps {
            log.push(StepLoss { step, loss: lv });
        }
    }
    model.round_to_f32();
    Ok(log)
}

pub fn concat_batches(parts: &[FlowBatch]) -> Result<FlowBatch> {
    let cat = |f: &dyn Fn(&FlowBatch) -> &Tensor| -> Result<Tensor> {
        let cols = f(&parts[0]).cols();
        let data: Vec<f64> = parts.iter().flat_map(|p| f(p).data().to_vec()).collect();
        Tensor::matrix(data.len() / cols, cols, data)
    };
    Ok(FlowBatch {
        x0: cat(&|p| &p.x0)?,
        x1: cat(&|p| &p.x1)?,
        t: parts.iter().flat_map(|p| p.t.iter().copied()).collect(),
        c: cat(&|p| &p.c)?,
    })
}

/// Fresh adapter with `B = 0` and Gaussian `A`, so it starts as a no-op.
pub fn init_lora(
    id: &str,
    catalog: &[LayerSpec],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    let mut rng = SeededRng::derive(seed, id);
    let layers = catalog
        .iter()
        .map(|s| {
            let a = Tensor::matrix(
                rank,
                s.k,
                rng.normals(rank * s.k, 1.0 / (s.k as f64).sqrt()),
            )?;
            LayerDelta::new(
                s.layer_id.clone(),
                Tensor::zeros(&[s.d, rank]),
                a.round_to_f32(),
                alpha,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    LoraAdapter::new(id, layers)
}

/// `(alpha/r)·(h·Aᵀ)·Bᵀ` on the tape.
pub fn lora_branch<'t>(h: Var<'t>, b: Var<'t>, a: Var<'t>, scale: f64) -> Result<Var<'t>> {
    h.matmul_bt(a)?.matmul_bt(b)?.scale(scale)
}

/// Fine-tunes only the factors of a fresh adapter on one dataset.
pub fn train_lora(
    base: &ToyModel,
    id: &str,
    dataset: &ToyDataset,
    condition: &[f64],
    seed: u64,
) -> Result<(LoraAdapter, Vec<StepLoss>)> {
    let cfg = &base.config;
    let mut adapter = init_lora(id, &base.catalog(), cfg.lora_rank, cfg.lora_alpha, seed)?;
    let mut rng = SeededRng::derive(seed, "lora-train");
    let mut adam = {
        let ts: Vec<&Tensor> = adapter.layers.iter().flat_map(|l| [&l.b, &l.a]).collect();
        AdamState::new(&ts, cfg.lora_lr)
    };
    let mut log = Vec::new();
    for step in 0..cfg.lora_steps {
        let batch = FlowBatch::draw(&dataset.points, condition, cfg.batch_size, &mut rng)?;
        let (input, target) = batch_io(&batch)?;
        let tape = Tape::new();
        let vars = base.bind_frozen(&tape);
        let factors: Vec<(Var<'_>, Var<'_>, f64)> = adapter
            .layers
            .iter()
            .map(|l| (tape.param(l.b.clone()), tape.param(l.a.clone()), l.scale()))
            .collect();
        let x = tape.constant(input);
        let v = base.forward_hooked(x, &vars, &mut |i, h, x| {
            let (b, a, s) = factors[i];
            x.add(lora_branch(h, b, a, s)?)
        })?;
        let loss = flow_loss_var(v, &target)?;
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "lora loss became {lv} at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = factors
            .iter()
            .flat_map(|&(b, a, _)| [grads.wrt(b), grads.wrt(a)])
            .collect();
        let mut ps: Vec<&mut Tensor> = adapter
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.b, &mut l.a])
            .collect();
        adam_step(&mut ps, &g, &mut adam)?;
        if step % 50 == 0 || step + 1 == cfg.lora_steps {
            log.push(StepLoss { step, loss: lv });
        }
    }
    for l in &mut adapter.layers {
        l.b = l.b.round_to_f32();
        l.a = l.a.round_to_f32();
    }
    adapter.validate()?;
    Ok((adapter, log))
}
