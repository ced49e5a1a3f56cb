use std::collections::BTreeMap;

use lorafuse_core::encoder::{encode_lora, init_encoder, EncoderConfig, EncoderParams};
use lorafuse_core::index::{build_index, similarity_heatmap, RetrievalIndex};
use lorafuse_core::lora::{random_adapter, LayerSpec, LoraAdapter};
use lorafuse_core::SeededRng;
use proptest::prelude::*;

fn fixture(n: usize) -> (EncoderParams, Vec<LoraAdapter>) {
    let catalog = [LayerSpec::new("h.0", 8, 5), LayerSpec::new("h.1", 8, 8)];
    let cfg = EncoderConfig {
        out_dim: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let params = init_encoder(&catalog, cfg, 11).unwrap();
    let pool = (0..n)
        .map(|i| random_adapter(&format!("ad{i:02}"), &catalog, 2, 500 + i as u64).unwrap())
        .collect();
    (params, pool)
}

fn random_index(n: usize, dim: usize, seed: u64) -> RetrievalIndex {
    let mut rng = SeededRng::new(seed);
    let ids = (0..n).map(|i| format!("id{i:03}")).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(dim, 1.0)).collect();
    RetrievalIndex::from_embeddings(ids, &rows, "test".into()).unwrap()
}

/// Independent scan: cosine in full precision, stable sort on (−score, id).
fn brute_force(index: &RetrievalIndex, q: &[f64], k: usize) -> Vec<(String, f64)> {
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = (0..index.len())
        .map(|i| {
            let e = index.embedding(i);
            let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = e.iter().zip(q).map(|(a, b)| a * b).sum();
            (index.ids()[i].clone(), dot / (en * qn))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn topk_agrees_with_a_brute_force_scan() {
    let index = random_index(40, 6, 1);
    let mut rng = SeededRng::new(2);
    for _ in 0..100 {
        let q = rng.normals(6, 1.0);
        let k = 1 + rng.below(index.len());
        let hits = index.query_topk(&q, k).unwrap();
        let oracle = brute_force(&index, &q, k);
        assert_eq!(hits.len(), k);
        for (h, (id, s)) in hits.iter().zip(&oracle) {
            assert_eq!(&h.adapter_id, id);
            assert!((h.score - s).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn smaller_k_is_a_prefix_and_scores_never_increase(n in 1usize..30, dim in 1usize..8, seed in any::<u64>(), k in 1usize..30) {
        let index = random_index(n, dim, seed);
        let k = k.min(n);
        let q = SeededRng::new(seed ^ 7).normals(dim, 1.0);
        let full = index.query_topk(&q, n).unwrap();
        let top = index.query_topk(&q, k).unwrap();
        prop_assert_eq!(&full[..k], &top[..]);
        for w in full.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        prop_assert!(full.iter().all(|h| (-1.0..=1.0).contains(&h.score)));
    }
}

#[test]
fn append_equals_rebuild() {
    let (params, pool) = fixture(9);
    let full = build_index(&pool, &params).unwrap();
    let mut grown = build_index(&pool[..4], &params).unwrap();
    grown.append(&pool[4..7], &params).unwrap();
    grown.append(&pool[7..], &params).unwrap();
    assert_eq!(grown.to_bytes(), full.to_bytes());
    assert!(
        grown.append(&pool[..1], &params).is_err(),
        "duplicates are rejected"
    );
}

#[test]
fn append_rejects_a_different_encoder() {
    let (params, pool) = fixture(3);
    let mut index = build_index(&pool[..2], &params).unwrap();
    let other = init_encoder(&params.catalog, params.config, 12).unwrap();
    assert!(index.append(&pool[2..], &other).is_err());
}

#[test]
fn index_rows_are_the_encoder_embeddings() {
    let (params, pool) = fixture(5);
    let index = build_index(&pool, &params).unwrap();
    for (i, a) in pool.iter().enumerate() {
        let e = encode_lora(a, &params).unwrap();
        for (x, y) in index.embedding(i).iter().zip(e.as_slice()) {
            assert_eq!(*x, *y as f32 as f64);
        }
        let hit = &index.query_topk(e.as_slice(), 1).unwrap()[0];
        assert_eq!(hit.adapter_id, a.adapter_id);
    }
}

#[test]
fn index_file_round_trip() {
    let (params, pool) = fixture(4);
    let index = build_index(&pool, &params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.lidx");
    index.save(&path).unwrap();
    let back = RetrievalIndex::load(&path).unwrap();
    assert_eq!(back.to_bytes(), index.to_bytes());
    assert_eq!(back.ids(), index.ids());
}

#[test]
fn k_outside_the_index_is_rejected() {
    let index = random_index(3, 4, 5);
    assert!(index.query_topk(&[1.0; 4], 0).is_err());
    assert!(index.query_topk(&[1.0; 4], 4).is_err());
    assert!(index.query_topk(&[1.0; 3], 1).is_err());
}

#[test]
fn heatmap_of_orthogonal_groups() {
    let rows = vec![
        vec![1.0, 0.0, 0.0],
        vec![2.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 3.0],
    ];
    let ids: Vec<String> = ["a1", "a2", "b1", "c1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let index = RetrievalIndex::from_embeddings(ids.clone(), &rows, "t".into()).unwrap();
    let groups: BTreeMap<String, String> = ids
        .iter()
        .map(|i| (i.clone(), i[..1].to_string()))
        .collect();
    let h = similarity_heatmap(&index, &groups).unwrap();
    assert_eq!(h.intra_mean, 1.0);
    assert_eq!(h.inter_mean, 0.0);
    for i in 0..4 {
        assert_eq!(h.matrix.at(i, i), 1.0);
        for j in 0..4 {
            assert_eq!(h.matrix.at(i, j), h.matrix.at(j, i));
        }
    }
}
