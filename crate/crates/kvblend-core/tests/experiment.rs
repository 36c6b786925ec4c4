//! Workload-level experiments: method comparison, aggregate consistency,
//! and store hit-rate behavior.

use kvblend_core::bench::{
    generate_chunk_db, generate_workload, run_experiment, ExperimentConfig, WorkloadSpec,
};
use kvblend_core::kvstore::{DeviceProfile, KvStore};
use kvblend_core::model::{init_weights, ModelConfig, Weights};
use kvblend_core::pipeline::Method;
use tempfile::TempDir;

fn desk_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        num_chunks_in_db: 10,
        chunk_len: 8,
        chunks_per_query: 2,
        zipf_s: 1.0,
        num_queries: 6,
        suffix_len: 4,
        seed,
    }
}

fn desk_model(seed: u64) -> Weights {
    init_weights(&ModelConfig::tiny(4, 2, 8, 32, 256, seed)).unwrap()
}

fn fresh_store(tmp: &TempDir, throughput: f64) -> KvStore {
    KvStore::open(
        tmp.path(),
        vec![DeviceProfile::new("sim", throughput, 1.0, 1 << 26)],
    )
    .unwrap()
}

#[test]
fn full_method_has_zero_attention_deviation() {
    let weights = desk_model(1);
    let spec = desk_spec(1);
    let db = generate_chunk_db(&spec, 256).unwrap();
    let workload = generate_workload(&spec, 256).unwrap();
    let tmp = TempDir::new().unwrap();
    let store = fresh_store(&tmp, 1e6);
    let report = run_experiment(
        &weights,
        &store,
        &db,
        &workload,
        Method::Full,
        1.0,
        &ExperimentConfig::default(),
    )
    .unwrap();
    for q in &report.per_query {
        for &d in q.dattn_per_layer.as_ref().unwrap() {
            assert_eq!(d, 0.0);
        }
    }
    assert_eq!(report.aggregates.dattn_mean.unwrap(), 0.0);
}

#[test]
fn blend_at_one_matches_full_cost_and_quality() {
    let weights = desk_model(2);
    let spec = desk_spec(2);
    let db = generate_chunk_db(&spec, 256).unwrap();
    let workload = generate_workload(&spec, 256).unwrap();
    let tmp = TempDir::new().unwrap();
    let store = fresh_store(&tmp, 1e6);
    let report = run_experiment(
        &weights,
        &store,
        &db,
        &workload,
        Method::Blend,
        1.0,
        &ExperimentConfig::default(),
    )
    .unwrap();
    for q in &report.per_query {
        assert!(q.dattn_mean.unwrap() <= 1e-5);
        // layer-1 bookkeeping only; at r=1 every layer does full work
        assert!((q.mac_ratio - 1.0).abs() < 0.01, "mac ratio {}", q.mac_ratio);
    }
}

#[test]
fn blend_beats_reuse_on_quality_within_ttft_factor_when_load_bound() {
    let weights = desk_model(3);
    let spec = desk_spec(3);
    let db = generate_chunk_db(&spec, 256).unwrap();
    let workload = generate_workload(&spec, 256).unwrap();
    // slow device + fast compute => load-bound for both methods
    let cfg = ExperimentConfig {
        oracle: true,
        mac_rate: 1e9,
        precompute_tier: None,
    };
    let run = |method, ratio| {
        let tmp = TempDir::new().unwrap();
        let store = fresh_store(&tmp, 1e5);
        run_experiment(&weights, &store, &db, &workload, method, ratio, &cfg).unwrap()
    };
    let blend = run(Method::Blend, 0.15);
    let reuse = run(Method::Reuse, 0.15);
    assert!(
        blend.aggregates.dattn_mean.unwrap() < reuse.aggregates.dattn_mean.unwrap(),
        "blend {} vs reuse {}",
        blend.aggregates.dattn_mean.unwrap(),
        reuse.aggregates.dattn_mean.unwrap()
    );
    assert!(
        blend.aggregates.ttft_mean <= 1.2 * reuse.aggregates.ttft_mean,
        "blend ttft {} vs reuse ttft {}",
        blend.aggregates.ttft_mean,
        reuse.aggregates.ttft_mean
    );
}

#[test]
fn aggregates_are_recomputable_from_per_query_rows() {
    let weights = desk_model(4);
    let spec = desk_spec(4);
    let db = generate_chunk_db(&spec, 256).unwrap();
    let workload = generate_workload(&spec, 256).unwrap();
    let tmp = TempDir::new().unwrap();
    let store = fresh_store(&tmp, 1e6);
    let report = run_experiment(
        &weights,
        &store,
        &db,
        &workload,
        Method::Blend,
        0.2,
        &ExperimentConfig::default(),
    )
    .unwrap();
    let json = serde_json::to_value(&report).unwrap();
    let rows = json["per_query"].as_array().unwrap();
    let n = rows.len() as f64;
    let ttft_mean: f64 = rows.iter().map(|r| r["ttft_sim"].as_f64().unwrap()).sum::<f64>() / n;
    assert!((ttft_mean - json["aggregates"]["ttft_mean"].as_f64().unwrap()).abs() < 1e-12);
    let dattn_mean: f64 =
        rows.iter().map(|r| r["dattn_mean"].as_f64().unwrap()).sum::<f64>() / n;
    assert!((dattn_mean - json["aggregates"]["dattn_mean"].as_f64().unwrap()).abs() < 1e-12);
    let hits: u64 = rows.iter().map(|r| r["store_hits"].as_u64().unwrap()).sum();
    let misses: u64 = rows.iter().map(|r| r["store_misses"].as_u64().unwrap()).sum();
    let hit_rate = hits as f64 / (hits + misses) as f64;
    assert!((hit_rate - json["aggregates"]["hit_rate"].as_f64().unwrap()).abs() < 1e-12);
    let mut ttfts: Vec<f64> = rows.iter().map(|r| r["ttft_sim"].as_f64().unwrap()).collect();
    ttfts.sort_by(f64::total_cmp);
    let p95 = ttfts[((0.95 * n).ceil() as usize).clamp(1, ttfts.len()) - 1];
    assert_eq!(p95, json["aggregates"]["ttft_p95"].as_f64().unwrap());
}

#[test]
fn hit_rate_grows_with_query_count_on_skewed_workloads() {
    // Statistical: cumulative hit rate after warm-up should not decrease as
    // more queries run, for most seeds.
    let mut agree = 0;
    for seed in 0..5u64 {
        let weights = desk_model(seed);
        let mut spec = desk_spec(seed);
        spec.zipf_s = 1.5;
        spec.num_queries = 16;
        let db = generate_chunk_db(&spec, 256).unwrap();
        let workload = generate_workload(&spec, 256).unwrap();
        let tmp = TempDir::new().unwrap();
        let store = fresh_store(&tmp, 1e6);
        let cfg = ExperimentConfig {
            oracle: false,
            ..Default::default()
        };
        let report = run_experiment(
            &weights,
            &store,
            &db,
            &workload,
            Method::Reuse,
            0.15,
            &cfg,
        )
        .unwrap();
        let warmup = 4;
        let rate_at = |upto: usize| {
            let hits: usize = report.per_query[..upto].iter().map(|q| q.store_hits).sum();
            let total: usize = report.per_query[..upto]
                .iter()
                .map(|q| q.store_hits + q.store_misses)
                .sum();
            hits as f64 / total as f64
        };
        if rate_at(16) >= rate_at(warmup) - 1e-9 {
            agree += 1;
        }
    }
    assert!(agree >= 4, "hit rate shrank on {} of 5 seeds", 5 - agree);
}

#[test]
fn unknown_chunk_id_is_config_error() {
    let weights = desk_model(5);
    let spec = desk_spec(5);
    let db = generate_chunk_db(&spec, 256).unwrap();
    let mut workload = generate_workload(&spec, 256).unwrap();
    workload[0].chunk_ids[0] = 999;
    let tmp = TempDir::new().unwrap();
    let store = fresh_store(&tmp, 1e6);
    let err = run_experiment(
        &weights,
        &store,
        &db,
        &workload,
        Method::Reuse,
        0.15,
        &ExperimentConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, kvblend_core::Error::Config { .. }));
}
