//! Fixtures shared by the benchmarks.

use mkgr_core::dataset::{make_planted_mkg, PlantedRule};
use mkgr_core::features::synth_features;
use mkgr_core::{FeatureStore, Generator, MultiModalKG, TrainConfig, Triplet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub kg: MultiModalKG,
    pub features: FeatureStore,
    pub config: TrainConfig,
    pub generator: Generator,
    pub queries: Vec<Triplet>,
}

/// A planted two-hop rule over `entities` entities with an untrained model.
pub fn fixture(entities: usize, d: usize) -> Fixture {
    let rules = [PlantedRule::new(&["r0", "r1"], "r2", entities / 6, 0)];
    let kg = make_planted_mkg(entities, 4, &rules, entities / 10, 1).expect("planted graph");
    let features = synth_features(&kg, 1, 8, 8);
    let config = TrainConfig { d, d_s: d, j: d, layers: 2, ..TrainConfig::default() };
    let model = config.model(features.d_i(), features.d_t(), 0);
    let generator = Generator::new(model, kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(2));
    let r2 = kg.relation_id("r2").expect("r2");
    let queries = kg.base_triplets().filter(|t| t.relation == r2).take(16).collect();
    Fixture { kg, features, config, generator, queries }
}
