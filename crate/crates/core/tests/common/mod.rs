#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

use vpr_rerank::gateway::{Backoff, ChatBackend, Gateway, ModelConfig};
use vpr_rerank::retrieval::{DescriptorSet, Manifest, PlaceRecord};

pub fn write_png(dir: &Path, name: &str) -> PathBuf {
    let path = dir.join(name);
    image::RgbImage::from_pixel(2, 2, image::Rgb([90, 120, 200]))
        .save(&path)
        .unwrap();
    path
}

/// Fast retry settings for tests.
pub fn model_config(max_concurrency: usize) -> ModelConfig {
    ModelConfig {
        endpoint_url: "mock://test".into(),
        model_name: "mock".into(),
        request_timeout: Duration::from_secs(5),
        max_retries: 3,
        max_concurrency,
        backoff: Backoff {
            initial: Duration::from_millis(5),
            cap: Duration::from_millis(40),
            jitter: 0.2,
        },
        ..ModelConfig::default()
    }
}

pub fn gateway(backend: Arc<dyn ChatBackend>, max_concurrency: usize) -> Gateway {
    Gateway::new(backend, model_config(max_concurrency)).unwrap()
}

/// Two places with real image files.
pub fn pair_fixture(dir: &Path) -> (PlaceRecord, PlaceRecord) {
    let q = PlaceRecord::utm("query", write_png(dir, "query.png"), 0.0, 0.0);
    let c = PlaceRecord::utm("cand", write_png(dir, "cand.png"), 3.0, 4.0);
    (q, c)
}

/// Geotagged places on a plane with descriptors equal to location plus
/// Gaussian noise.
pub struct World {
    pub dir: TempDir,
    pub manifest: Manifest,
    pub queries: DescriptorSet,
    pub db: DescriptorSet,
}

pub struct WorldParams {
    pub seed: u64,
    pub n_db: usize,
    pub n_queries: usize,
    pub extent_m: f64,
    /// Max offset of a query from the database place it revisits.
    pub query_offset_m: f64,
    pub descriptor_noise_m: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            seed: 0,
            n_db: 200,
            n_queries: 100,
            extent_m: 1000.0,
            query_offset_m: 8.0,
            descriptor_noise_m: 20.0,
        }
    }
}

pub fn world(params: &WorldParams) -> World {
    let dir = tempfile::tempdir().unwrap();
    let img = write_png(dir.path(), "place.png");
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.descriptor_noise_m).unwrap();

    let mut records = Vec::new();
    let mut db = Vec::new();
    let mut db_locs = Vec::new();
    for i in 0..params.n_db {
        let (x, y) = (rng.random_range(0.0..params.extent_m), rng.random_range(0.0..params.extent_m));
        let id = format!("db{i:04}");
        records.push(PlaceRecord::utm(&id, &img, x, y));
        db.push((id, vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)]));
        db_locs.push((x, y));
    }
    let mut queries = Vec::new();
    for i in 0..params.n_queries {
        let (bx, by) = db_locs[rng.random_range(0..params.n_db)];
        let r = rng.random_range(0.0..params.query_offset_m);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (x, y) = (bx + r * theta.cos(), by + r * theta.sin());
        let id = format!("q{i:04}");
        records.push(PlaceRecord::utm(&id, &img, x, y));
        queries.push((id, vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)]));
    }
    World {
        manifest: Manifest::new(records).unwrap(),
        queries: DescriptorSet::from_entries(2, queries).unwrap(),
        db: DescriptorSet::from_entries(2, db).unwrap(),
        dir,
    }
}
