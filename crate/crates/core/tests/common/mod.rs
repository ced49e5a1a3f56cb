//! Fixtures shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

use lorafuse_core::autodiff::{Tape, Var};
use lorafuse_core::encoder::{
    encode_lora_var, init_encoder, token_embed_var, EncoderConfig, EncoderParams, EncoderVars,
};
use lorafuse_core::gate::{fuse_var, GateMode, GateParams, GateVars};
use lorafuse_core::gradcheck::{
    checked_op, grad_check, GradReport, DEFAULT_FD_STEP, DEFAULT_TOLERANCE,
};
use lorafuse_core::kernel::DEFAULT_LN_EPS;
use lorafuse_core::lora::{random_adapter, LayerDelta, LayerSpec, LoraAdapter};
use lorafuse_core::nn::{attention_block_vars, BlockConfig, BlockParams, BlockVars};
use lorafuse_core::retriever::contrastive_loss_var;
use lorafuse_core::toy::model::{flow_loss_var, ToyConfig, ToyModel, ToyVars};
use lorafuse_core::{Result, SeededRng, Tensor};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    Tensor::matrix(rows, cols, rng.normals(rows * cols, 1.0)).unwrap()
}

pub fn to_na(t: &Tensor) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).unwrap()
}

/// Replaces every layer's factors by `(B·R, R⁻¹·A)` for a random invertible `R`.
pub fn reparameterize(adapter: &LoraAdapter, rng: &mut SeededRng) -> LoraAdapter {
    let layers = adapter
        .layers
        .iter()
        .map(|l| {
            let r = loop {
                let r = to_na(&random_matrix(l.r, l.r, rng));
                let s = r.singular_values();
                if s.min() > 0.2 * s.max() {
                    break r;
                }
            };
            let r_inv = r.clone().try_inverse().unwrap();
            let b = from_na(&(to_na(&l.b) * r));
            let a = from_na(&(r_inv * to_na(&l.a)));
            LayerDelta::new(l.layer_id.clone(), b, a, l.alpha).unwrap()
        })
        .collect();
    LoraAdapter::new(adapter.adapter_id.clone(), layers).unwrap()
}

fn jitter(t: &Tensor, rng: &mut SeededRng, std: f64) -> Tensor {
    let noise = Tensor::new(t.shape().to_vec(), rng.normals(t.len(), std)).unwrap();
    t.add(&noise).unwrap()
}

fn check(
    name: &str,
    op: &lorafuse_core::gradcheck::CheckedOp<'_>,
    inputs: &[Tensor],
) -> GradReport {
    grad_check(name, op, inputs, DEFAULT_FD_STEP, DEFAULT_TOLERANCE).unwrap()
}

pub fn random_gate(d: usize, rng: &mut SeededRng) -> GateParams {
    GateParams {
        w_x: random_matrix(1, d, rng),
        w_l: random_matrix(1, d, rng),
        w_c: random_matrix(1, d, rng),
        b: random_matrix(1, d, rng),
        w_o: random_matrix(1, d, rng),
    }
}

/// Attention-block parameters with every entry perturbed away from its
/// deterministic init.
fn random_block(cfg: &BlockConfig, rng: &mut SeededRng) -> BlockParams {
    let mut p = BlockParams::init(cfg, rng);
    for t in p.tensors_mut() {
        *t = jitter(t, rng, 0.3);
    }
    p
}

fn small_encoder(seed: u64) -> (EncoderParams, LoraAdapter) {
    let catalog = [LayerSpec::new("l.0", 4, 3), LayerSpec::new("l.1", 3, 5)];
    let cfg = EncoderConfig {
        out_dim: 4,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut params = init_encoder(&catalog, cfg, seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xabc);
    for t in params.tensors_mut() {
        *t = jitter(t, &mut rng, 0.3);
    }
    let adapter = random_adapter("probe", &catalog, 2, seed).unwrap();
    (params, adapter)
}

/// Key biases shift every attention logit in a row by the same amount and
/// so have a structurally zero gradient; they are checked separately by
/// [`key_bias_gradient_is_null`].
fn is_key_bias(index: usize, params: &EncoderParams) -> bool {
    let offset = 2 * params.tokens.len() + 2;
    let per_block = BlockParams::FIELD_NAMES.len();
    let bk = BlockParams::FIELD_NAMES
        .iter()
        .position(|f| *f == "bk")
        .unwrap();
    index >= offset && (index - offset) % per_block == bk
}

/// One report per (operation, random shape).
pub fn gradient_suite() -> Vec<GradReport> {
    let mut rng = SeededRng::new(2024);
    let mut out = Vec::new();

    for &(r, c) in &[(2, 3), (3, 5), (4, 8)] {
        let op = checked_op(|_, v| v[0].layer_norm(DEFAULT_LN_EPS));
        out.push(check(
            &format!("layer_norm {r}x{c}"),
            &op,
            &[random_matrix(r, c, &mut rng)],
        ));
    }
    for &(r, c) in &[(1, 1), (2, 4), (5, 3)] {
        let op = checked_op(|_, v| v[0].sigmoid());
        out.push(check(
            &format!("sigmoid {r}x{c}"),
            &op,
            &[random_matrix(r, c, &mut rng)],
        ));
    }
    for &(r, c) in &[(1, 3), (3, 4), (4, 7)] {
        let op = checked_op(|_, v| v[0].softmax());
        out.push(check(
            &format!("softmax {r}x{c}"),
            &op,
            &[random_matrix(r, c, &mut rng)],
        ));
    }
    for &(m, k, n) in &[(1, 2, 3), (3, 4, 2), (5, 3, 6)] {
        let op = checked_op(|_, v| v[0].matmul(v[1]));
        let inputs = [random_matrix(m, k, &mut rng), random_matrix(k, n, &mut rng)];
        out.push(check(&format!("matmul {m}x{k}x{n}"), &op, &inputs));
        let op = checked_op(|_, v| v[0].matmul_bt(v[1]));
        let inputs = [random_matrix(m, k, &mut rng), random_matrix(n, k, &mut rng)];
        out.push(check(&format!("matmul_bt {m}x{k}x{n}"), &op, &inputs));
    }
    for &(len, dim, heads) in &[(2, 4, 1), (3, 4, 2), (4, 6, 3)] {
        let cfg = BlockConfig {
            dim,
            heads,
            mlp_hidden: 2 * dim,
        };
        let p = random_block(&cfg, &mut rng);
        let bk = BlockParams::FIELD_NAMES
            .iter()
            .position(|f| *f == "bk")
            .unwrap();
        let frozen_bk = p.bk.clone();
        let op = checked_op(move |tape: &Tape, v: &[Var<'_>]| {
            let mut vars: Vec<Var<'_>> = v[1..].to_vec();
            vars.insert(bk, tape.constant(frozen_bk.clone()));
            attention_block_vars(v[0], &BlockVars::from_slice(&vars), heads)
        });
        let mut inputs = vec![random_matrix(len, dim, &mut rng)];
        inputs.extend(
            p.tensors()
                .into_iter()
                .enumerate()
                .filter(|(i, _)| *i != bk)
                .map(|(_, t)| t.clone()),
        );
        out.push(check(
            &format!("attention_block len{len} dim{dim} heads{heads}"),
            &op,
            &inputs,
        ));
    }
    for &(d, k, r, o) in &[(3, 2, 1, 2), (4, 5, 2, 3), (6, 4, 3, 5)] {
        let ld = LayerDelta::new(
            "t",
            random_matrix(d, r, &mut rng),
            random_matrix(r, k, &mut rng),
            2.0,
        )
        .unwrap();
        let op = checked_op(move |_, v| token_embed_var(&ld, v[0], v[1]));
        let inputs = [random_matrix(1, k, &mut rng), random_matrix(d, o, &mut rng)];
        out.push(check(
            &format!("token_embed d{d} k{k} r{r} out{o}"),
            &op,
            &inputs,
        ));
    }
    for seed in [1u64, 2, 3] {
        let (params, adapter) = small_encoder(seed);
        let all: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let keep: Vec<usize> = (0..all.len())
            .filter(|&i| !is_key_bias(i, &params))
            .collect();
        let inputs: Vec<Tensor> = keep.iter().map(|&i| all[i].clone()).collect();
        let op = checked_op(|tape: &Tape, v: &[Var<'_>]| {
            let mut vars: Vec<Var<'_>> = all.iter().map(|t| tape.constant(t.clone())).collect();
            for (slot, &i) in keep.iter().enumerate() {
                vars[i] = v[slot];
            }
            encode_lora_var(&adapter, &params, &EncoderVars::from_slice(&params, &vars)?)
        });
        out.push(check(&format!("encode_lora seed{seed}"), &op, &inputs));
    }
    for &(n, dim) in &[(2, 3), (4, 5), (6, 4)] {
        let op = checked_op(|_, v| contrastive_loss_var(v[0], v[1], None));
        let inputs = [
            random_matrix(n, dim, &mut rng),
            random_matrix(n, dim, &mut rng),
        ];
        out.push(check(
            &format!("contrastive_loss N{n} D{dim}"),
            &op,
            &inputs,
        ));
        let op = checked_op(|_, v| contrastive_loss_var(v[0], v[1], Some(v[2])));
        let inputs = [
            random_matrix(n, dim, &mut rng),
            random_matrix(n, dim, &mut rng),
            Tensor::scalar(0.3),
        ];
        out.push(check(
            &format!("contrastive_loss scaled N{n} D{dim}"),
            &op,
            &inputs,
        ));
    }
    for &(l, d, k) in &[(3, 6, 2), (2, 4, 1), (4, 5, 3)] {
        for mode in [GateMode::PerToken, GateMode::Pooled] {
            let op = checked_op(move |_, v| {
                fuse_var(v[0], &v[1..1 + k], &GateVars::from_slice(&v[1 + k..]), mode)
            });
            let mut inputs = vec![random_matrix(l, d, &mut rng)];
            inputs.extend((0..k).map(|_| random_matrix(l, d, &mut rng)));
            inputs.extend(random_gate(d, &mut rng).tensors().into_iter().cloned());
            out.push(check(
                &format!("gated_fusion {mode:?} l{l} d{d} k{k}"),
                &op,
                &inputs,
            ));
        }
    }
    for &(hidden, layers, n) in &[(4, 1, 3), (5, 2, 4), (3, 3, 5)] {
        let cfg = ToyConfig {
            hidden,
            layers,
            c_dim: 3,
            lora_rank: 2,
            ..ToyConfig::default()
        };
        let model = ToyModel::init(cfg.clone(), 7).unwrap();
        let input = random_matrix(n, cfg.input_dim(), &mut rng);
        let target = random_matrix(n, 2, &mut rng);
        let m = model.clone();
        let op = checked_op(move |_, v: &[Var<'_>]| {
            let count = m.weights.len();
            let vars = ToyVars {
                weights: (0..count).map(|i| v[2 * i]).collect(),
                biases: (0..count).map(|i| v[2 * i + 1]).collect(),
                head_w: v[2 * count],
                head_b: v[2 * count + 1],
            };
            let x = v[0].tape().constant(input.clone());
            let vel = m.forward_hooked(x, &vars, &mut |_, _, y| Ok(y))?;
            flow_loss_var(vel, &target)
        });
        let inputs: Vec<Tensor> = model
            .tensors()
            .into_iter()
            .map(|t| jitter(t, &mut rng, 0.1))
            .collect();
        out.push(check(
            &format!("flow_matching_loss hidden{hidden} layers{layers} n{n}"),
            &op,
            &inputs,
        ));
    }
    out
}

/// Largest analytic gradient magnitude of `encode_lora` with respect to any
/// key bias; zero up to round-off.
pub fn key_bias_gradient_is_null() -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in [1u64, 2, 3] {
        let (params, adapter) = small_encoder(seed);
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let out = encode_lora_var(&adapter, &params, &vars)?;
        let mut prng = SeededRng::new(0x9e37_79b9);
        let w = Tensor::new(out.shape(), prng.normals(out.value().len(), 1.0))?;
        let loss = out.mul(tape.constant(w))?.sum()?;
        let grads = tape.backward(loss)?;
        for b in &vars.blocks {
            worst = worst.max(
                grads
                    .wrt(b.bk)
                    .data()
                    .iter()
                    .fold(0.0, |m, g| m.max(g.abs())),
            );
        }
    }
    Ok(worst)
}

pub mod fusion {
    use lorafuse_core::fusion::{attach_fusion, init_gates};
    use lorafuse_core::gate::{compute_gates, FusionActivation, GateBundle, GateMode, GateParams};
    use lorafuse_core::lora::{build_global_lora, random_adapter, LoraAdapter};
    use lorafuse_core::toy::model::{ToyConfig, ToyModel, VelocityModel};
    use lorafuse_core::{SeededRng, Tensor};

    pub fn host() -> ToyModel {
        ToyModel::init(ToyConfig::default(), 21).unwrap()
    }

    pub fn adapters(model: &ToyModel, n: usize, seed: u64) -> Vec<LoraAdapter> {
        (0..n)
            .map(|i| {
                random_adapter(&format!("a{i}"), &model.catalog(), 4, seed + i as u64).unwrap()
            })
            .collect()
    }

    pub fn inputs(model: &ToyModel, n: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::new(seed);
        Tensor::matrix(
            n,
            model.config.input_dim(),
            rng.normals(n * model.config.input_dim(), 1.0),
        )
        .unwrap()
    }

    /// Number of the `n` input rows whose fused output differs in any bit
    /// from the host output, with fresh gates on three adapters plus their
    /// global adapter.
    pub fn identity_mismatches(n: usize) -> usize {
        let model = host();
        let pool = adapters(&model, 3, 40);
        let gates = init_gates(&model).unwrap();
        let global = build_global_lora(&pool, 4).unwrap();
        let x = inputs(&model, n, 41);
        let mut bad = 0;
        for mode in [GateMode::PerToken, GateMode::Pooled] {
            let fused = attach_fusion(&model, &pool, &gates, Some(global.clone()), mode).unwrap();
            let a = fused.velocity(&x).unwrap();
            let b = model.velocity(&x).unwrap();
            bad += (0..n)
                .filter(|&i| {
                    a.row(i)
                        .iter()
                        .zip(b.row(i))
                        .any(|(p, q)| p.to_bits() != q.to_bits())
                })
                .count();
        }
        bad
    }

    /// Largest deviation between one adapter fused through saturated gates
    /// (`b = 40`, `w_o = 1`) and the same adapter merged into the weights.
    pub fn saturated_vs_direct(n: usize) -> f64 {
        let model = host();
        let pool = adapters(&model, 1, 50);
        let mut gates: GateBundle = init_gates(&model).unwrap();
        for g in gates.values_mut() {
            g.b = Tensor::filled(g.b.shape(), 40.0);
            g.w_o = Tensor::filled(g.w_o.shape(), 1.0);
        }
        let merged = model.merged(&pool, 1.0).unwrap();
        let x = inputs(&model, n, 51);
        let want = merged.velocity(&x).unwrap();
        [GateMode::PerToken, GateMode::Pooled]
            .into_iter()
            .map(|mode| {
                let fused = attach_fusion(&model, &pool, &gates, None, mode).unwrap();
                fused.velocity(&x).unwrap().max_abs_diff(&want)
            })
            .fold(0.0, f64::max)
    }

    /// Gate value for a preactivation of exactly 2.5.
    pub fn scalar_gate() -> f64 {
        let p = GateParams {
            w_x: Tensor::row_vector(vec![0.7, -0.2]),
            w_l: Tensor::row_vector(vec![0.5, 0.1]),
            w_c: Tensor::row_vector(vec![0.4, 0.0]),
            b: Tensor::row_vector(vec![2.7, 0.0]),
            w_o: Tensor::row_vector(vec![1.0, 1.0]),
        };
        // x̂ = (1, −1) and L̂ = (−1, 1), so z₀ = 0.7 − 0.5 − 0.4 + 2.7 = 2.5.
        let act = FusionActivation {
            x: Tensor::row_vector(vec![3.0, 1.0]),
            branches: vec![Tensor::row_vector(vec![2.0, 5.0])],
        };
        compute_gates(&act, &p, GateMode::PerToken).unwrap().gates[0].at(0, 0)
    }
}

pub mod pipeline {
    use lorafuse_core::config::RunConfig;

    /// A pool small enough to build in well under a second.
    pub fn tiny_config() -> RunConfig {
        RunConfig::from_json(
            r#"{
                "seed": 3,
                "encoder": {"out_dim": 8, "blocks": 1, "heads": 2, "mlp_ratio": 2},
                "retriever": {"epochs": 3, "batch_size": 4},
                "fusion": {"steps": 6, "batch_size": 16, "log_every": 2, "eval_every": 3,
                           "eval_samples": 16, "gen_steps": 3, "r_g": 2},
                "toy": {"themes": ["spiral", "grid"], "variations": ["compact", "shifted"],
                        "hidden": 8, "layers": 2, "c_dim": 3, "samples_per_theme": 64,
                        "heldout_per_theme": 32, "base_steps": 10, "lora_steps": 6,
                        "batch_size": 16, "lora_rank": 2,
                        "text": {"dim": 8, "buckets": 64, "seed": 1}}
            }"#,
        )
        .unwrap()
    }

    /// Every file under `dir` with its bytes, keyed by relative path.
    pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
        fn walk(
            root: &std::path::Path,
            dir: &std::path::Path,
            out: &mut std::collections::BTreeMap<String, Vec<u8>>,
        ) {
            for entry in std::fs::read_dir(dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    walk(root, &p, out);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
        let mut out = std::collections::BTreeMap::new();
        walk(dir, dir, &mut out);
        out
    }
}
