//! Gated multi-adapter models and interference-resistant gate training.
//!
//! Training repeatedly draws a target and an interference adapter, attaches
//! both (plus the rank-`r_g` global adapter of the pair) to the frozen host
//! model, and fits only the gate parameters to the target's data with the
//! flow-matching objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gate::{fuse_var, init_gate, GateBundle, GateMode, GateParams, GateVars};
use crate::lora::{build_global_lora, LoraAdapter, DEFAULT_GLOBAL_RANK};
use crate::optim::{adam_step, AdamState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::toy::metrics::energy_distance;
use crate::toy::model::{
    batch_io, flow_loss_var, flow_matching_loss, integrate, lora_branch, FlowBatch, ToyModel,
    VelocityModel, POINT_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub r_g: usize,
    pub mode: GateMode,
    /// Attach the global adapter of the fused set as an extra gated branch.
    pub use_global: bool,
    /// Interference adapters drawn per step besides the target.
    pub interference: usize,
    /// When false, `w_o` keeps its initial value.
    pub train_w_o: bool,
    pub log_every: usize,
    pub eval_every: usize,
    /// Points per evaluation batch and per generated sample set.
    pub eval_samples: usize,
    pub gen_steps: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 128,
            lr: 1e-2,
            r_g: DEFAULT_GLOBAL_RANK,
            mode: GateMode::PerToken,
            use_global: true,
            interference: 1,
            train_w_o: true,
            log_every: 25,
            eval_every: 250,
            eval_samples: 512,
            gen_steps: 32,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.r_g == 0 || self.interference == 0 {
            return Err(Error::arg(
                "fusion steps, batch size, r_g and interference must be positive",
            ));
        }
        if self.log_every == 0
            || self.eval_every == 0
            || self.eval_samples == 0
            || self.gen_steps == 0
        {
            return Err(Error::arg(
                "fusion logging and evaluation sizes must be positive",
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::arg("fusion learning rate must be positive"));
        }
        Ok(())
    }
}

/// A target plus `m − 1` distinct interference positions, uniformly at random.
pub fn sample_roles(pool_len: usize, m: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if m < 2 || pool_len < m {
        return Err(Error::arg(format!(
            "cannot draw {m} distinct adapters from a pool of {pool_len}"
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    while chosen.len() < m {
        // Draw among the positions not yet taken.
        let mut p = rng.below(pool_len - chosen.len());
        let mut sorted = chosen.clone();
        sorted.sort_unstable();
        for &c in &sorted {
            if p >= c {
                p += 1;
            }
        }
        chosen.push(p);
    }
    Ok(chosen)
}

/// `(target, interference)` drawn uniformly from distinct pool members.
pub fn sample_pair<'a>(
    pool: &'a [LoraAdapter],
    rng: &mut SeededRng,
) -> Result<(&'a LoraAdapter, &'a LoraAdapter)> {
    let r = sample_roles(pool.len(), 2, rng)?;
    Ok((&pool[r[0]], &pool[r[1]]))
}

/// Host model with several adapters attached through per-layer gates.
pub struct FusedModel<'a> {
    base: &'a ToyModel,
    /// Set members followed by the global adapter, if any.
    branches: Vec<LoraAdapter>,
    gates: &'a GateBundle,
    mode: GateMode,
}

/// Attaches `adapters` (and `global` as one more branch) to `base`. Layers no
/// adapter touches pass through unchanged.
pub fn attach_fusion<'a>(
    base: &'a ToyModel,
    adapters: &[LoraAdapter],
    gates: &'a GateBundle,
    global: Option<LoraAdapter>,
    mode: GateMode,
) -> Result<FusedModel<'a>> {
    let catalog = base.catalog();
    let mut branches = adapters.to_vec();
    branches.extend(global);
    for a in &branches {
        for l in &a.layers {
            let spec = catalog
                .iter()
                .find(|s| s.layer_id == l.layer_id)
                .ok_or_else(|| Error::UnknownLayer(l.layer_id.clone()))?;
            if spec.d != l.d || spec.k != l.k {
                return Err(Error::arg(format!(
                    "adapter {} layer {} is {}x{}, host is {}x{}",
                    a.adapter_id, l.layer_id, l.d, l.k, spec.d, spec.k
                )));
            }
            match gates.get(&l.layer_id) {
                Some(g) if g.dim() == spec.d => {}
                Some(g) => {
                    return Err(Error::arg(format!(
                        "gate for {} has width {}, layer output is {}",
                        l.layer_id,
                        g.dim(),
                        spec.d
                    )))
                }
                None => return Err(Error::arg(format!("no gate for layer {}", l.layer_id))),
            }
        }
    }
    Ok(FusedModel {
        base,
        branches,
        gates,
        mode,
    })
}

impl FusedModel<'_> {
    pub fn branches(&self) -> &[LoraAdapter] {
        &self.branches
    }

    /// Forward pass with caller-bound gate variables (trainable or frozen).
    pub fn velocity_with<'t>(
        &self,
        input: Var<'t>,
        gate_vars: &BTreeMap<String, GateVars<'t>>,
    ) -> Result<Var<'t>> {
        let tape = input.tape();
        let vars = self.base.bind_frozen(tape);
        let catalog = self.base.catalog();
        // Factors enter as constants, one (B, A, scale) per branch and layer.
        let factors: Vec<Vec<(Var<'t>, Var<'t>, f64)>> = catalog
            .iter()
            .map(|spec| {
                self.branches
                    .iter()
                    .filter_map(|a| a.layer(&spec.layer_id))
                    .map(|l| {
                        (
                            tape.constant(l.b.clone()),
                            tape.constant(l.a.clone()),
                            l.scale(),
                        )
                    })
                    .collect()
            })
            .collect();
        self.base.forward_hooked(input, &vars, &mut |i, h, x| {
            if factors[i].is_empty() {
                return Ok(x);
            }
            let outs = factors[i]
                .iter()
                .map(|&(b, a, s)| lora_branch(h, b, a, s))
                .collect::<Result<Vec<_>>>()?;
            let g = &gate_vars[&catalog[i].layer_id];
            fuse_var(x, &outs, g, self.mode)
        })
    }
}

impl VelocityModel for FusedModel<'_> {
    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn velocity_var<'t>(&self, tape: &'t Tape, input: Var<'t>) -> Result<Var<'t>> {
        let gv: BTreeMap<String, GateVars<'t>> = self
            .gates
            .iter()
            .map(|(k, g)| (k.clone(), g.bind_frozen(tape)))
            .collect();
        self.velocity_with(input, &gv)
    }
}

/// Fresh identity gates for every layer of the host.
pub fn init_gates(base: &ToyModel) -> Result<GateBundle> {
    base.catalog()
        .into_iter()
        .map(|s| Ok((s.layer_id, init_gate(s.d)?)))
        .collect()
}

/// A dataset an adapter's gates are trained or evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    /// `n × 2`
    pub points: Tensor,
    /// Condition vector of the adapter's prompt.
    pub condition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
}

pub struct FusionRun {
    pub gates: GateBundle,
    pub log: Vec<FusionRecord>,
    /// Rank of every global adapter built during training.
    pub global_ranks: Vec<usize>,
}

fn global_for(
    members: &[&LoraAdapter],
    r_g: usize,
    cache: &mut BTreeMap<Vec<String>, LoraAdapter>,
) -> Result<LoraAdapter> {
    let mut key: Vec<String> = members.iter().map(|a| a.adapter_id.clone()).collect();
    key.sort();
    if let Some(g) = cache.get(&key) {
        return Ok(g.clone());
    }
    let owned: Vec<LoraAdapter> = members.iter().map(|&a| a.clone()).collect();
    let g = build_global_lora(&owned, r_g)?;
    cache.insert(key, g.clone());
    Ok(g)
}

fn bundle_tensors(g: &GateBundle) -> Vec<&Tensor> {
    g.values().flat_map(GateParams::tensors).collect()
}

/// Trains gate parameters only; the host model and every adapter stay frozen.
pub fn train_fusion(
    base: &ToyModel,
    pool: &[LoraAdapter],
    data: &BTreeMap<String, TargetData>,
    config: &FusionConfig,
    seed: u64,
) -> Result<FusionRun> {
    config.validate()?;
    let m = config.interference + 1;
    if pool.len() < m {
        return Err(Error::arg(format!(
            "pool of {} cannot supply {m} distinct adapters",
            pool.len()
        )));
    }
    for a in pool {
        if !data.contains_key(&a.adapter_id) {
            return Err(Error::arg(format!(
                "no dataset for adapter {}",
                a.adapter_id
            )));
        }
    }
    let mut gates = init_gates(base)?;
    let mut adam = AdamState::new(&bundle_tensors(&gates), config.lr);
    let mut rng = SeededRng::derive(seed, "fusion-train");
    let mut cache = BTreeMap::new();
    let mut log = Vec::new();
    let mut global_ranks = Vec::new();

    // Fixed monitoring batches: a few role draws with frozen noise.
    let mut eval_rng = SeededRng::derive(seed, "fusion-monitor");
    let monitor: Vec<(Vec<usize>, FlowBatch)> = (0..4)
        .map(|_| {
            let roles = sample_roles(pool.len(), m, &mut eval_rng)?;
            let d = &data[&pool[roles[0]].adapter_id];
            let b = FlowBatch::draw(&d.points, &d.condition, config.batch_size, &mut eval_rng)?;
            Ok((roles, b))
        })
        .collect::<Result<_>>()?;

    let mut running = 0.0;
    let mut count = 0usize;
    for step in 0..config.steps {
        let roles = sample_roles(pool.len(), m, &mut rng)?;
        let members: Vec<&LoraAdapter> = roles.iter().map(|&r| &pool[r]).collect();
        let target = &data[&members[0].adapter_id];
        let batch = FlowBatch::draw(
            &target.points,
            &target.condition,
            config.batch_size,
            &mut rng,
        )?;
        let global = if config.use_global {
            let g = global_for(&members, config.r_g, &mut cache)?;
            global_ranks.extend(g.layers.iter().map(|l| l.r));
            Some(g)
        } else {
            None
        };
        let adapters: Vec<LoraAdapter> = members.iter().map(|&a| a.clone()).collect();
        let fused = attach_fusion(base, &adapters, &gates, global, config.mode)?;

        let (input, target_v) = batch_io(&batch)?;
        let tape = Tape::new();
        let gv: BTreeMap<String, GateVars<'_>> = gates
            .iter()
            .map(|(k, g)| (k.clone(), g.bind(&tape)))
            .collect();
        let x = tape.constant(input);
        let v = fused.velocity_with(x, &gv)?;
        let loss = flow_loss_var(v, &target_v)?;
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "fusion loss became {lv} at step {step}"
            )));
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = Vec::new();
        for vars in gv.values() {
            for (name, var) in GateParams::FIELD_NAMES.iter().zip(vars.to_vec()) {
                let grad = grads.wrt(var);
                g.push(if *name == "w_o" && !config.train_w_o {
                    Tensor::zeros(grad.shape())
                } else {
                    grad
                });
            }
        }
        drop(fused);
        let mut params: Vec<&mut Tensor> = gates
            .values_mut()
            .flat_map(GateParams::tensors_mut)
            .collect();
        adam_step(&mut params, &g, &mut adam)?;
        if !config.train_w_o {
            for gp in gates.values_mut() {
                gp.w_o = Tensor::zeros(gp.w_o.shape());
            }
        }

        running += lv;
        count += 1;
        let last = step + 1 == config.steps;
        if (step + 1) % config.log_every == 0 || last {
            let eval_loss = if (step + 1) % config.eval_every == 0 || last {
                let mut total = 0.0;
                for (roles, b) in &monitor {
                    let members: Vec<&LoraAdapter> = roles.iter().map(|&r| &pool[r]).collect();
                    let global = if config.use_global {
                        Some(global_for(&members, config.r_g, &mut cache)?)
                    } else {
                        None
                    };
                    let adapters: Vec<LoraAdapter> = members.iter().map(|&a| a.clone()).collect();
                    let fused = attach_fusion(base, &adapters, &gates, global, config.mode)?;
                    total += flow_matching_loss(&fused, b)?;
                }
                Some(total / monitor.len() as f64)
            } else {
                None
            };
            log.push(FusionRecord {
                step: step + 1,
                loss: running / count as f64,
                eval_loss,
            });
            running = 0.0;
            count = 0;
        }
    }
    for gp in gates.values_mut() {
        for t in gp.tensors_mut() {
            *t = t.round_to_f32();
        }
    }
    Ok(FusionRun {
        gates,
        log,
        global_ranks,
    })
}

/// Scores of one model on one target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub flow_loss: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub adapters: Vec<String>,
    pub gated: ArmScore,
    pub direct: ArmScore,
    pub base: ArmScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub sets: Vec<SetReport>,
    pub gated_loss_wins: usize,
    pub gated_energy_wins: usize,
}

fn score(
    model: &dyn VelocityModel,
    batch: &FlowBatch,
    x0: &Tensor,
    target: &TargetData,
    steps: usize,
) -> Result<ArmScore> {
    let loss = flow_matching_loss(model, batch)?;
    let samples = integrate(model, x0.clone(), &target.condition, steps)?;
    Ok(ArmScore {
        flow_loss: loss,
        energy: energy_distance(&samples, &target.points)?,
    })
}

fn mean_scores(s: &[ArmScore]) -> ArmScore {
    let n = s.len() as f64;
    ArmScore {
        flow_loss: s.iter().map(|a| a.flow_loss).sum::<f64>() / n,
        energy: s.iter().map(|a| a.energy).sum::<f64>() / n,
    }
}

/// Compares gated fusion, direct addition (scale 1) and the bare host on
/// held-out data. Each set member takes a turn as the target; scores are
/// averaged over members. An empty set scores the host on every arm.
pub fn eval_fusion(
    base: &ToyModel,
    gates: &GateBundle,
    pool: &[LoraAdapter],
    sets: &[Vec<String>],
    heldout: &BTreeMap<String, TargetData>,
    config: &FusionConfig,
    seed: u64,
) -> Result<FusionReport> {
    config.validate()?;
    let by_id: BTreeMap<&str, &LoraAdapter> =
        pool.iter().map(|a| (a.adapter_id.as_str(), a)).collect();
    let mut reports = Vec::with_capacity(sets.len());
    for (si, set) in sets.iter().enumerate() {
        let adapters = set
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|&a| a.clone())
                    .ok_or_else(|| Error::arg(format!("unknown adapter {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let global = if config.use_global && !adapters.is_empty() {
            Some(build_global_lora(&adapters, config.r_g)?)
        } else {
            None
        };
        let fused = attach_fusion(base, &adapters, gates, global, config.mode)?;
        let direct = base.merged(&adapters, 1.0)?;
        let targets: Vec<&str> = if set.is_empty() {
            heldout.keys().take(1).map(String::as_str).collect()
        } else {
            set.iter().map(String::as_str).collect()
        };
        let (mut g, mut d, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for (ti, id) in targets.iter().enumerate() {
            let target = heldout
                .get(*id)
                .ok_or_else(|| Error::arg(format!("no held-out data for {id}")))?;
            let mut rng = SeededRng::derive(seed, &format!("eval/{si}/{ti}/{id}"));
            let batch = FlowBatch::draw(
                &target.points,
                &target.condition,
                config.eval_samples,
                &mut rng,
            )?;
            let x0 = Tensor::matrix(
                config.eval_samples,
                POINT_DIM,
                rng.normals(config.eval_samples * POINT_DIM, 1.0),
            )?;
            g.push(score(&fused, &batch, &x0, target, config.gen_steps)?);
            d.push(score(&direct, &batch, &x0, target, config.gen_steps)?);
            b.push(score(base, &batch, &x0, target, config.gen_steps)?);
        }
        reports.push(SetReport {
            adapters: set.clone(),
            gated: mean_scores(&g),
            direct: mean_scores(&d),
            base: mean_scores(&b),
        });
    }
    Ok(FusionReport {
        gated_loss_wins: reports
            .iter()
            .filter(|r| r.gated.flow_loss <= r.direct.flow_loss)
            .count(),
        gated_energy_wins: reports
            .iter()
            .filter(|r| r.gated.energy <= r.direct.energy)
            .count(),
        sets: reports,
    })
}

/// `count` distinct random subsets of `size` pool ids, each sorted.
pub fn random_sets(
    pool: &[LoraAdapter],
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    let mut rng = SeededRng::derive(seed, &format!("sets/{size}"));
    let mut out: Vec<Vec<String>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 100 {
            return Err(Error::arg(format!(
                "cannot find {count} distinct sets of size {size}"
            )));
        }
        let roles = sample_roles(pool.len(), size, &mut rng)?;
        let mut ids: Vec<String> = roles.iter().map(|&r| pool[r].adapter_id.clone()).collect();
        ids.sort();
        if !out.contains(&ids) {
            out.push(ids);
        }
    }
    Ok(out)
}
