//! Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Experiment artifacts are kept under the cargo target tmpdir.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use lorafuse_core::config::RunConfig;
use lorafuse_core::encoder::{encode_lora, init_encoder, EncoderConfig};
use lorafuse_core::fusion::{FusionRecord, FusionReport};
use lorafuse_core::index::{build_index, RetrievalIndex};
use lorafuse_core::lora::{
    build_global_lora, materialize_delta, random_adapter, sum_deltas, LayerSpec, LoraAdapter,
};
use lorafuse_core::pipeline::{self, Pool};
use lorafuse_core::retriever::contrastive_loss;
use lorafuse_core::svd::truncated_svd;
use lorafuse_core::{SeededRng, Tensor};

use common::{random_matrix, reparameterize, to_na};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Harness {
    failures: usize,
}

impl Harness {
    fn run(
        &mut self,
        id: usize,
        name: &str,
        budget: Option<Duration>,
        f: impl FnOnce() -> Outcome,
    ) {
        let start = Instant::now();
        let mut o = f();
        let took = start.elapsed();
        if let Some(limit) = budget {
            if took > limit {
                o.passed = false;
                o.detail
                    .push_str(&format!("; over the {} s budget", limit.as_secs()));
            }
        }
        if !o.passed {
            self.failures += 1;
        }
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} {id:>2} {name}: {} [{:.1} s]",
            o.detail,
            took.as_secs_f64()
        );
    }
}

fn gradients() -> Outcome {
    let reports = common::gradient_suite();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.op_name.as_str())
        .collect();
    let key_bias = common::key_bias_gradient_is_null().unwrap();
    let ok = failed.is_empty() && worst < 1e-4 && key_bias < 1e-12;
    outcome(
        ok,
        format!(
            "{} checks, worst rel err {worst:.2e}, failed {failed:?}, key-bias grad {key_bias:.1e}",
            reports.len()
        ),
    )
}

fn eckart_young() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst_svd = 0.0f64;
    for _ in 0..50 {
        let rows = 4 + rng.below(29);
        let cols = 4 + rng.below(29);
        let m = random_matrix(rows, cols, &mut rng);
        let mut s: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let tail = s.iter().skip(4).map(|x| x * x).sum::<f64>().sqrt();
        let residual = m
            .sub(&truncated_svd(&m, 4).unwrap().reconstruct())
            .unwrap()
            .frobenius_norm();
        worst_svd = worst_svd.max((residual - tail).abs() / m.frobenius_norm());
    }
    let mut worst_global = 0.0f64;
    for case in 0..50u64 {
        let d = 4 + rng.below(13);
        let k = 4 + rng.below(13);
        let catalog = [LayerSpec::new("p", d, k), LayerSpec::new("q", k, d)];
        let ranks = [1 + rng.below(2), 1 + rng.below(2)];
        let r_g = (ranks.iter().sum::<usize>() + rng.below(3)).min(4);
        let ads: Vec<LoraAdapter> = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                random_adapter(&format!("a{i}"), &catalog, r, 100 * case + i as u64).unwrap()
            })
            .collect();
        let g = build_global_lora(&ads, r_g).unwrap();
        for layer in &g.layers {
            let sum = sum_deltas(&ads, &layer.layer_id).unwrap();
            let err = sum.max_abs_diff(&materialize_delta(layer).unwrap())
                / sum.frobenius_norm().max(1.0);
            worst_global = worst_global.max(err);
        }
    }
    outcome(
        worst_svd <= 1e-9 && worst_global <= 1e-8,
        format!("worst rank-4 tail gap {worst_svd:.1e} (rel), worst global reconstruction {worst_global:.1e}"),
    )
}

fn fusion_identities() -> Outcome {
    let mismatches = common::fusion::identity_mismatches(100);
    let saturated = common::fusion::saturated_vs_direct(100);
    let g = common::fusion::scalar_gate();
    outcome(
        mismatches == 0 && saturated < 1e-5 && (g - 0.9241418).abs() < 1e-6,
        format!("identity mismatches {mismatches}, saturated vs direct {saturated:.1e}, scalar gate {g:.7}"),
    )
}

fn contrastive_values() -> Outcome {
    let ones = Tensor::matrix(4, 1, vec![1.0; 4]).unwrap();
    let uniform = contrastive_loss(&ones, &ones).unwrap().loss;
    let expect_uniform = 8.0 * 4f64.ln();
    let r = 10f64.sqrt();
    let diag = Tensor::matrix(2, 2, vec![r, 0.0, 0.0, r]).unwrap();
    let near = contrastive_loss(&diag, &diag).unwrap().loss;
    let expect_near = 4.0 * (-10f64).exp().ln_1p();
    let mut rng = SeededRng::new(4);
    let mut worst_perm = 0.0f64;
    for _ in 0..50 {
        let n = 2 + rng.below(8);
        let e = random_matrix(n, 5, &mut rng);
        let t = random_matrix(n, 5, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pick =
            |m: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| m.row(i)).collect::<Vec<_>>());
        let a = contrastive_loss(&e, &t).unwrap().loss;
        let b = contrastive_loss(&pick(&e), &pick(&t)).unwrap().loss;
        worst_perm = worst_perm.max((a - b).abs());
    }
    let ok = (uniform - expect_uniform).abs() < 1e-9
        && (near - expect_near).abs() < 1e-9
        && worst_perm <= 1e-12;
    outcome(
        ok,
        format!(
            "uniform {uniform:.9}, near-diagonal {near:.6e}, permutation drift {worst_perm:.1e}"
        ),
    )
}

/// The default-configuration pool shared by the three experiments.
struct Experiment {
    root: PathBuf,
    config: RunConfig,
    pool: PathBuf,
}

const SEED: u64 = 0;

fn retrieval_experiment(x: &Experiment) -> Outcome {
    pipeline::synth_pool(&x.config, SEED, &x.pool).unwrap();
    let ret = x.root.join("retriever");
    let run = pipeline::train_retriever(&x.config, SEED, &x.pool, &ret).unwrap();
    pipeline::build_index(&x.pool, &ret.join(pipeline::ENCODER_FILE), &ret).unwrap();
    let grouping = Pool::load(&x.pool).unwrap().theme_grouping();
    let (_, stats) = pipeline::heatmap(&ret.join(pipeline::INDEX_FILE), &grouping, &ret).unwrap();
    let last = run.metrics.last().unwrap();
    let gap = stats.gap.unwrap_or(f64::NAN);
    outcome(
        last.recall_at_1 >= 0.9 && gap >= 0.15 && last.epoch <= 200,
        format!(
            "{} adapters, {} epochs, held-out recall@1 {:.3}, intra {:.3} inter {:.3} gap {gap:.3}",
            grouping.len(),
            last.epoch,
            last.recall_at_1,
            stats.intra_mean.unwrap_or(f64::NAN),
            stats.inter_mean.unwrap_or(f64::NAN),
        ),
    )
}

fn random_index(n: usize, dim: usize, rng: &mut SeededRng) -> RetrievalIndex {
    let ids = (0..n).map(|i| format!("id{i:03}")).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(dim, 1.0)).collect();
    RetrievalIndex::from_embeddings(ids, &rows, "acceptance".into()).unwrap()
}

fn retrieval_contracts() -> Outcome {
    let mut rng = SeededRng::new(6);
    let index = random_index(60, 8, &mut rng);
    let n = index.len();
    let (mut prefix, mut monotone, mut oracle) = (true, true, true);
    for _ in 0..100 {
        let q = rng.normals(8, 1.0);
        let full = index.query_topk(&q, n).unwrap();
        let k = 1 + rng.below(n);
        prefix &= index.query_topk(&q, k).unwrap()[..] == full[..k];
        monotone &= full.windows(2).all(|w| w[0].score >= w[1].score);
        // Independent scan in full precision, ties broken by id.
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut scan: Vec<(String, f64)> = (0..n)
            .map(|i| {
                let e = index.embedding(i);
                let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                (
                    index.ids()[i].clone(),
                    e.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (en * qn),
                )
            })
            .collect();
        scan.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        oracle &= full
            .iter()
            .zip(&scan)
            .all(|(h, (id, s))| &h.adapter_id == id && (h.score - s).abs() < 1e-12);
    }
    let catalog = [LayerSpec::new("h.0", 8, 5), LayerSpec::new("h.1", 8, 8)];
    let cfg = EncoderConfig {
        out_dim: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let params = init_encoder(&catalog, cfg, 11).unwrap();
    let pool: Vec<LoraAdapter> = (0..12)
        .map(|i| random_adapter(&format!("ad{i:02}"), &catalog, 2, 40 + i as u64).unwrap())
        .collect();
    let rebuilt = build_index(&pool, &params).unwrap();
    let mut grown = build_index(&pool[..5], &params).unwrap();
    grown.append(&pool[5..9], &params).unwrap();
    grown.append(&pool[9..], &params).unwrap();
    let append = grown.to_bytes() == rebuilt.to_bytes();
    outcome(
        prefix && monotone && oracle && append,
        format!("prefix {prefix}, monotone {monotone}, brute-force oracle {oracle}, append equals rebuild {append}"),
    )
}

fn wins(report: &FusionReport) -> String {
    format!(
        "loss {}/{} energy {}/{}",
        report.gated_loss_wins,
        report.sets.len(),
        report.gated_energy_wins,
        report.sets.len()
    )
}

fn efficacy_experiment(x: &Experiment) -> Outcome {
    let fus = x.root.join("fusion");
    pipeline::train_fusion(&x.config, SEED, &x.pool, &fus).unwrap();
    let reports = pipeline::eval_fusion(
        &x.config,
        SEED,
        &x.pool,
        &fus.join(pipeline::GATES_FILE),
        None,
        10,
        &fus,
    )
    .unwrap();
    let ok = reports
        .iter()
        .all(|(_, r)| r.gated_loss_wins >= 8 && r.gated_energy_wins >= 8);
    let detail = reports
        .iter()
        .map(|(s, r)| format!("size {s}: gated beats direct on {}", wins(r)))
        .collect::<Vec<_>>();
    outcome(ok, detail.join("; "))
}

fn final_eval(log: &[FusionRecord]) -> f64 {
    log.iter()
        .rev()
        .find_map(|r| r.eval_loss)
        .unwrap_or(f64::NAN)
}

fn ablation_experiment(x: &Experiment) -> Outcome {
    let with_dir = x.root.join("fusion");
    let without_dir = x.root.join("fusion_no_global");
    let mut without_cfg = x.config.clone();
    without_cfg.fusion.use_global = false;
    let without = pipeline::train_fusion(&without_cfg, SEED, &x.pool, &without_dir).unwrap();
    let with_log: Vec<FusionRecord> =
        std::fs::read_to_string(with_dir.join(pipeline::FUSION_METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
    let eval = |cfg: &RunConfig, dir: &Path| {
        let out = dir.join("size_3");
        pipeline::eval_fusion(
            cfg,
            SEED,
            &x.pool,
            &dir.join(pipeline::GATES_FILE),
            Some(3),
            10,
            &out,
        )
        .unwrap()
        .remove(0)
        .1
    };
    let a = eval(&x.config, &with_dir);
    let b = eval(&without_cfg, &without_dir);
    let count = a
        .sets
        .iter()
        .zip(&b.sets)
        .filter(|(s, t)| s.gated.flow_loss <= t.gated.flow_loss)
        .count();
    let mean = |r: &FusionReport| {
        r.sets.iter().map(|s| s.gated.flow_loss).sum::<f64>() / r.sets.len() as f64
    };
    outcome(
        count >= 6,
        format!(
            "with global lower on {count}/10 3-adapter sets (mean {:.4} vs {:.4}); final monitor eval loss {:.4} vs {:.4}; curves in {} and {}",
            mean(&a),
            mean(&b),
            final_eval(&with_log),
            final_eval(&without.log),
            with_dir.join(pipeline::FUSION_METRICS_FILE).display(),
            without_dir.join(pipeline::FUSION_METRICS_FILE).display(),
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let cfg = common::pipeline::tiny_config();
    let stages = |dir: &Path| {
        let pool = dir.join("pool");
        pipeline::synth_pool(&cfg, 3, &pool).unwrap();
        pipeline::train_retriever(&cfg, 3, &pool, &dir.join("retriever")).unwrap();
        pipeline::train_fusion(&cfg, 3, &pool, &dir.join("fusion")).unwrap();
        common::pipeline::snapshot(dir)
    };
    let a = stages(&root.join("a"));
    let b = stages(&root.join("b"));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let covered = [
        pipeline::ENCODER_FILE,
        pipeline::RETRIEVER_METRICS_FILE,
        pipeline::GATES_FILE,
        pipeline::FUSION_METRICS_FILE,
    ]
    .iter()
    .all(|f| a.keys().any(|k| k.ends_with(f)));
    outcome(
        a.len() == b.len() && differing.is_empty() && covered,
        format!("{} files compared, differing {differing:?}", a.len()),
    )
}

fn encoder_invariance() -> Outcome {
    let catalog = [
        LayerSpec::new("h.0", 12, 7),
        LayerSpec::new("h.1", 12, 12),
        LayerSpec::new("h.2", 5, 12),
    ];
    let cfg = EncoderConfig {
        out_dim: 16,
        blocks: 2,
        heads: 4,
        mlp_ratio: 2,
    };
    let params = init_encoder(&catalog, cfg, 3).unwrap();
    let mut rng = SeededRng::new(10);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let a = random_adapter(&format!("a{i}"), &catalog, 4, 2000 + i).unwrap();
        let b = reparameterize(&a, &mut rng);
        let ea = encode_lora(&a, &params).unwrap();
        let eb = encode_lora(&b, &params).unwrap();
        let cos: f64 = ea
            .as_slice()
            .iter()
            .zip(eb.as_slice())
            .map(|(x, y)| x * y)
            .sum();
        worst = worst.max(1.0 - cos);
    }
    outcome(
        worst < 1e-6,
        format!("worst cosine distance {worst:.1e} over 20 adapters"),
    )
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        std::fs::remove_dir_all(&root).unwrap();
    }
    std::fs::create_dir_all(&root).unwrap();
    let x = Experiment {
        config: RunConfig::default(),
        pool: root.join("pool"),
        root: root.clone(),
    };
    let mut h = Harness { failures: 0 };
    let secs = Duration::from_secs;
    h.run(1, "gradient suite", Some(secs(120)), gradients);
    h.run(
        2,
        "truncated SVD and global LoRA oracle",
        Some(secs(30)),
        eckart_young,
    );
    h.run(3, "fusion identities", Some(secs(10)), fusion_identities);
    h.run(
        4,
        "contrastive loss values",
        Some(secs(1)),
        contrastive_values,
    );
    h.run(5, "retrieval experiment", Some(secs(600)), || {
        retrieval_experiment(&x)
    });
    h.run(6, "retrieval contracts", Some(secs(5)), retrieval_contracts);
    h.run(7, "fusion efficacy experiment", Some(secs(1200)), || {
        efficacy_experiment(&x)
    });
    h.run(8, "global branch ablation", None, || {
        ablation_experiment(&x)
    });
    h.run(9, "determinism", None, || {
        determinism(&root.join("determinism"))
    });
    h.run(
        10,
        "encoder reparameterization invariance",
        None,
        encoder_invariance,
    );
    println!("artifacts: {}", root.display());
    if h.failures > 0 {
        println!("{} criteria failed", h.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
