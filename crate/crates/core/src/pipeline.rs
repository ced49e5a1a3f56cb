//! File-level steps behind the batch commands. Every step reads its inputs
//! from disk and writes byte-deterministic outputs for a given seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::container::{load_pack, save_pack};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{
    attach_fusion, eval_fusion as eval_sets, random_sets, train_fusion as train_gates,
    FusionReport, FusionRun, TargetData,
};
use crate::gate::{load_gates, save_gates, GateBundle};
use crate::index::{build_index as build, similarity_heatmap, Heatmap, Hit, RetrievalIndex};
use crate::lora::{build_global_lora, LoraAdapter};
use crate::retriever::{
    read_caption_pairs, train_retriever as train_encoder, write_caption_pairs, write_metrics_jsonl,
    CaptionPair, RetrieverRun,
};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::text::TextEmbedder;
use crate::toy::model::{
    generate as euler_generate, train_base, train_lora, Conditioner, StepLoss, ToyModel,
    VelocityModel,
};
use crate::toy::themes::{
    make_dataset, read_dataset_jsonl, write_dataset_jsonl, write_samples_csv, Generator, ThemeSpec,
    ToyDataset, Variation,
};

pub const POOL_MANIFEST: &str = "manifest.json";
pub const BASE_FILE: &str = "base.ltoy";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const HELDOUT_CAPTIONS_FILE: &str = "captions_heldout.jsonl";
pub const ENCODER_FILE: &str = "encoder.lenc";
pub const RETRIEVER_METRICS_FILE: &str = "retriever_metrics.jsonl";
pub const INDEX_FILE: &str = "index.lidx";
pub const GATES_FILE: &str = "gates.lgat";
pub const FUSION_METRICS_FILE: &str = "fusion_metrics.jsonl";

/// Independent child seed for a named stage.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    SeededRng::derive(seed, label).next_u64()
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Pool synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub adapter_id: String,
    pub generator: Generator,
    pub variation: Variation,
    pub prompt: String,
    pub pack: String,
    pub sha256: String,
    pub dataset: String,
    pub heldout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolManifest {
    pub seed: u64,
    pub toy: crate::toy::ToyConfig,
    pub base: String,
    pub base_sha256: String,
    pub captions: String,
    pub heldout_captions: String,
    pub adapters: Vec<PoolEntry>,
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    phase: &'a str,
    step: usize,
    loss: f64,
}

/// Trains the host model on the plain themes, fine-tunes one adapter per
/// (theme, variation) and writes packs, captions, datasets and a manifest.
pub fn synth_pool(config: &RunConfig, seed: u64, out: &Path) -> Result<PoolManifest> {
    let toy = &config.toy;
    toy.validate()?;
    let mut themes = toy.themes.clone();
    themes.sort();
    themes.dedup();
    if themes.len() < 2 {
        return Err(Error::arg("a pool needs at least two distinct themes"));
    }
    if toy.variations.is_empty() {
        return Err(Error::arg("a pool needs at least one variation"));
    }
    std::fs::create_dir_all(out.join("adapters"))?;
    std::fs::create_dir_all(out.join("datasets"))?;
    let cond = Conditioner::new(toy)?;
    let mut log: Vec<(String, StepLoss)> = Vec::new();

    let mut base_sets = Vec::new();
    for &g in &toy.themes {
        let spec = ThemeSpec::new(g, Variation::Plain);
        let ds = make_dataset(&spec, toy.samples_per_theme, sub_seed(seed, "base-data"))?;
        let c = cond.condition(&ds.caption)?;
        base_sets.push((ds, c));
    }
    let mut model = ToyModel::init(toy.clone(), sub_seed(seed, "base-init"))?;
    let refs: Vec<(&ToyDataset, Vec<f64>)> =
        base_sets.iter().map(|(d, c)| (d, c.clone())).collect();
    for s in train_base(
        &mut model,
        &refs,
        toy.base_steps,
        sub_seed(seed, "base-train"),
    )? {
        log.push(("base".into(), s));
    }
    model.save(out.join(BASE_FILE))?;

    let mut entries = Vec::new();
    let mut train_caps = Vec::new();
    let mut heldout_caps = Vec::new();
    for &g in &toy.themes {
        for &v in &toy.variations {
            let spec = ThemeSpec::new(g, v);
            let id = spec.theme_id.clone();
            let ds = make_dataset(&spec, toy.samples_per_theme, sub_seed(seed, "adapter-data"))?;
            let held = make_dataset(
                &spec,
                toy.heldout_per_theme,
                sub_seed(seed, "adapter-heldout"),
            )?;
            let c = cond.condition(&ds.caption)?;
            let (adapter, steps) =
                train_lora(&model, &id, &ds, &c, sub_seed(seed, &format!("lora/{id}")))?;
            let adapter = adapter
                .with_metadata("generator", g.name())
                .with_metadata("variation", v.name())
                .with_metadata("prompt", spec.prompt());
            for s in steps {
                log.push((id.clone(), s));
            }
            let pack = format!("adapters/{id}.lpak");
            save_pack(&adapter, out.join(&pack))?;
            let dataset = format!("datasets/{id}.jsonl");
            let heldout = format!("datasets/{id}.heldout.jsonl");
            write_dataset_jsonl(out.join(&dataset), &ds)?;
            write_dataset_jsonl(out.join(&heldout), &held)?;
            train_caps.extend(
                spec.train_captions()
                    .into_iter()
                    .map(|c| CaptionPair::new(&id, c)),
            );
            heldout_caps.extend(
                spec.heldout_captions()
                    .into_iter()
                    .map(|c| CaptionPair::new(&id, c)),
            );
            entries.push(PoolEntry {
                adapter_id: id,
                generator: g,
                variation: v,
                prompt: spec.prompt(),
                sha256: sha256_file(out.join(&pack))?,
                pack,
                dataset,
                heldout,
            });
        }
    }
    write_caption_pairs(out.join(CAPTIONS_FILE), &train_caps)?;
    write_caption_pairs(out.join(HELDOUT_CAPTIONS_FILE), &heldout_caps)?;
    let records: Vec<TrainRecord<'_>> = log
        .iter()
        .map(|(p, s)| TrainRecord {
            phase: p,
            step: s.step,
            loss: s.loss,
        })
        .collect();
    write_metrics_jsonl(out.join("train_metrics.jsonl"), &records)?;
    let manifest = PoolManifest {
        seed,
        toy: toy.clone(),
        base: BASE_FILE.into(),
        base_sha256: sha256_file(out.join(BASE_FILE))?,
        captions: CAPTIONS_FILE.into(),
        heldout_captions: HELDOUT_CAPTIONS_FILE.into(),
        adapters: entries,
    };
    write_json(out.join(POOL_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Everything a synthesised pool directory holds, loaded into memory.
pub struct Pool {
    pub dir: PathBuf,
    pub manifest: PoolManifest,
    pub base: ToyModel,
    pub adapters: Vec<LoraAdapter>,
    pub train_captions: Vec<CaptionPair>,
    pub heldout_captions: Vec<CaptionPair>,
    pub train_data: BTreeMap<String, ToyDataset>,
    pub heldout_data: BTreeMap<String, ToyDataset>,
}

impl Pool {
    pub fn load(dir: &Path) -> Result<Pool> {
        let manifest: PoolManifest = read_json(dir.join(POOL_MANIFEST))?;
        let base = ToyModel::load(dir.join(&manifest.base))?;
        let mut adapters = Vec::new();
        let mut train_data = BTreeMap::new();
        let mut heldout_data = BTreeMap::new();
        for e in &manifest.adapters {
            adapters.push(load_pack(dir.join(&e.pack))?);
            train_data.insert(
                e.adapter_id.clone(),
                read_dataset_jsonl(dir.join(&e.dataset), &e.adapter_id)?,
            );
            heldout_data.insert(
                e.adapter_id.clone(),
                read_dataset_jsonl(dir.join(&e.heldout), &e.adapter_id)?,
            );
        }
        Ok(Pool {
            dir: dir.to_path_buf(),
            train_captions: read_caption_pairs(dir.join(&manifest.captions))?,
            heldout_captions: read_caption_pairs(dir.join(&manifest.heldout_captions))?,
            manifest,
            base,
            adapters,
            train_data,
            heldout_data,
        })
    }

    /// Adapter id → generator name.
    pub fn theme_grouping(&self) -> BTreeMap<String, String> {
        self.manifest
            .adapters
            .iter()
            .map(|e| (e.adapter_id.clone(), e.generator.name().to_string()))
            .collect()
    }

    /// Points plus prompt condition per adapter.
    pub fn targets(&self, heldout: bool) -> Result<BTreeMap<String, TargetData>> {
        let cond = Conditioner::new(&self.manifest.toy)?;
        let src = if heldout {
            &self.heldout_data
        } else {
            &self.train_data
        };
        src.iter()
            .map(|(id, ds)| {
                Ok((
                    id.clone(),
                    TargetData {
                        points: ds.points.clone(),
                        condition: cond.condition(&ds.caption)?,
                    },
                ))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Retrieval

pub fn train_retriever(
    config: &RunConfig,
    seed: u64,
    pool_dir: &Path,
    out: &Path,
) -> Result<RetrieverRun> {
    let pool = Pool::load(pool_dir)?;
    let catalog = pool.base.catalog();
    let init = init_encoder(&catalog, config.encoder, sub_seed(seed, "encoder-init"))?;
    let text = TextEmbedder::new(pool.manifest.toy.text)?;
    let mut rc = config.retriever;
    rc.batch_size = rc.batch_size.min(pool.adapters.len());
    let run = train_encoder(
        &pool.adapters,
        &pool.train_captions,
        &pool.heldout_captions,
        init,
        &text,
        &rc,
        sub_seed(seed, "retriever"),
    )?;
    std::fs::create_dir_all(out)?;
    run.params.save(out.join(ENCODER_FILE))?;
    write_metrics_jsonl(out.join(RETRIEVER_METRICS_FILE), &run.metrics)?;
    Ok(run)
}

pub fn build_index(pool_dir: &Path, encoder: &Path, out: &Path) -> Result<RetrievalIndex> {
    let pool = Pool::load(pool_dir)?;
    let params = EncoderParams::load(encoder)?;
    let index = build(&pool.adapters, &params)?;
    std::fs::create_dir_all(out)?;
    index.save(out.join(INDEX_FILE))?;
    Ok(index)
}

pub fn query(config: &RunConfig, index: &Path, text: &str, k: usize) -> Result<Vec<Hit>> {
    let index = RetrievalIndex::load(index)?;
    let t = TextEmbedder::new(config.toy.text)?.embed(text)?;
    index.query_topk(t.as_slice(), k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStats {
    /// `null` when no group has two members.
    pub intra_mean: Option<f64>,
    pub inter_mean: Option<f64>,
    pub gap: Option<f64>,
}

pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("id");
    for id in &h.ids {
        let _ = write!(s, ",{id}");
    }
    s.push('\n');
    for (i, id) in h.ids.iter().enumerate() {
        s.push_str(id);
        for v in h.matrix.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn heatmap_stats(h: &Heatmap) -> HeatmapStats {
    let finite = |v: f64| v.is_finite().then_some(v);
    HeatmapStats {
        intra_mean: finite(h.intra_mean),
        inter_mean: finite(h.inter_mean),
        gap: finite(h.intra_mean - h.inter_mean),
    }
}

/// Writes `heatmap.csv` and `heatmap_stats.json`. Without a grouping every
/// adapter is grouped by the generator recorded in the pool manifest.
pub fn heatmap(
    index: &Path,
    grouping: &BTreeMap<String, String>,
    out: &Path,
) -> Result<(Heatmap, HeatmapStats)> {
    let index = RetrievalIndex::load(index)?;
    let h = similarity_heatmap(&index, grouping)?;
    let stats = heatmap_stats(&h);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("heatmap.csv"), heatmap_csv(&h))?;
    write_json(out.join("heatmap_stats.json"), &stats)?;
    Ok((h, stats))
}

// ---------------------------------------------------------------------------
// Fusion

pub fn train_fusion(
    config: &RunConfig,
    seed: u64,
    pool_dir: &Path,
    out: &Path,
) -> Result<FusionRun> {
    let pool = Pool::load(pool_dir)?;
    let data = pool.targets(false)?;
    let run = train_gates(
        &pool.base,
        &pool.adapters,
        &data,
        &config.fusion,
        sub_seed(seed, "fusion"),
    )?;
    std::fs::create_dir_all(out)?;
    save_gates(&run.gates, out.join(GATES_FILE))?;
    write_metrics_jsonl(out.join(FUSION_METRICS_FILE), &run.log)?;
    Ok(run)
}

/// Evaluates random adapter sets; `set_size` `None` runs sizes 2 and 3.
pub fn eval_fusion(
    config: &RunConfig,
    seed: u64,
    pool_dir: &Path,
    gates: &Path,
    set_size: Option<usize>,
    count: usize,
    out: &Path,
) -> Result<Vec<(usize, FusionReport)>> {
    let pool = Pool::load(pool_dir)?;
    let gates = load_gates(gates)?;
    let heldout = pool.targets(true)?;
    let sizes = match set_size {
        Some(s) => vec![s],
        None => vec![2, 3],
    };
    let mut out_reports = Vec::new();
    for size in sizes {
        let sets = random_sets(&pool.adapters, size, count, sub_seed(seed, "eval-sets"))?;
        let report = eval_sets(
            &pool.base,
            &gates,
            &pool.adapters,
            &sets,
            &heldout,
            &config.fusion,
            sub_seed(seed, "eval"),
        )?;
        out_reports.push((size, report));
    }
    std::fs::create_dir_all(out)?;
    let json: BTreeMap<String, &FusionReport> = out_reports
        .iter()
        .map(|(s, r)| (format!("size_{s}"), r))
        .collect();
    write_json(out.join("fusion_report.json"), &json)?;
    Ok(out_reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub adapters: Vec<Hit>,
    pub samples: usize,
    pub steps: usize,
}

/// Retrieves the top-`k` adapters for `prompt` (when an index is given),
/// fuses them through the trained gates and writes generated points as CSV.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    config: &RunConfig,
    seed: u64,
    pool_dir: &Path,
    gates: Option<&Path>,
    index: Option<&Path>,
    prompt: &str,
    k: usize,
    n: usize,
    out: &Path,
) -> Result<GenerationRecord> {
    let pool = Pool::load(pool_dir)?;
    let cond = Conditioner::new(&pool.manifest.toy)?;
    let c = cond.condition(prompt)?;
    let hits = match index {
        Some(p) => query(config, p, prompt, k)?,
        None => Vec::new(),
    };
    let chosen: Vec<LoraAdapter> = hits
        .iter()
        .map(|h| {
            pool.adapters
                .iter()
                .find(|a| a.adapter_id == h.adapter_id)
                .cloned()
                .ok_or_else(|| {
                    Error::arg(format!(
                        "index refers to adapter {} missing from the pool",
                        h.adapter_id
                    ))
                })
        })
        .collect::<Result<_>>()?;
    let steps = config.fusion.gen_steps;
    let samples: Tensor = if chosen.is_empty() {
        euler_generate(&pool.base, &c, n, steps, seed)?
    } else {
        let bundle: GateBundle = match gates {
            Some(p) => load_gates(p)?,
            None => return Err(Error::arg("fusing retrieved adapters needs --gates")),
        };
        let global = if config.fusion.use_global {
            Some(build_global_lora(&chosen, config.fusion.r_g)?)
        } else {
            None
        };
        let fused = attach_fusion(&pool.base, &chosen, &bundle, global, config.fusion.mode)?;
        euler_generate(&fused as &dyn VelocityModel, &c, n, steps, seed)?
    };
    std::fs::create_dir_all(out)?;
    write_samples_csv(out.join("samples.csv"), &samples)?;
    let record = GenerationRecord {
        prompt: prompt.to_string(),
        adapters: hits,
        samples: n,
        steps,
    };
    write_json(out.join("generation.json"), &record)?;
    Ok(record)
}
