use mkgr_core::dataset::{make_planted_mkg, partition_queries, PlantedRule};
use mkgr_core::features::{synth_features, FeatureStore};
use mkgr_core::rules::RuleIndex;
use mkgr_core::trainer::{evaluate_checkpoint, Checkpoint, EvalSet, TrainData, Trainer};
use mkgr_core::{MultiModalKG, TrainConfig};

#[test]
fn train_save_reload_and_evaluate_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let kg = make_planted_mkg(60, 4, &[PlantedRule::new(&["r0", "r1"], "r2", 12, 2)], 10, 3).unwrap();
    let graph_path = dir.path().join("graph.tsv");
    kg.write_triples(&graph_path).unwrap();
    let kg = MultiModalKG::load_triples(&graph_path).unwrap();
    let feats = synth_features(&kg, 0, 3, 3);
    let feat_path = dir.path().join("features.bin");
    feats.save(&kg, &feat_path).unwrap();
    let feats = FeatureStore::load(&kg, &feat_path).unwrap();

    let split = partition_queries(&kg, 1);
    let valid = EvalSet::new(&kg, &feats, &split.valid);
    let data = TrainData { kg: &kg, features: &feats, pretrained: None, queries: &split.train, valid: Some(valid.clone()) };
    let cfg = TrainConfig { d: 4, d_s: 4, j: 4, layers: 1, epochs: 2, batch_size: 8, rollouts: 2, critic_steps: 1, beam: 4, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, &data).unwrap();
    let mut lines = Vec::new();
    let out = trainer
        .run_with(|rec, _, _| {
            lines.push(serde_json::to_string(rec).unwrap());
            Ok(())
        })
        .unwrap();
    assert_eq!(lines.len(), 2);
    assert_eq!(out.log.len(), 2);

    let ckpt_path = dir.path().join("model.ckpt");
    out.best.save(&ckpt_path).unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let (a, ra) = evaluate_checkpoint(&out.best, &valid, 4).unwrap();
    let (b, rb) = evaluate_checkpoint(&loaded, &valid, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);

    let rules = loaded.rule_index().unwrap().unwrap();
    let rules_path = dir.path().join("rules.txt");
    rules.write(&rules_path, kg.relations()).unwrap();
    let back = RuleIndex::read(&rules_path, kg.relations()).unwrap();
    assert_eq!(back.to_lines(kg.relations()), rules.to_lines(kg.relations()));

    let reloaded = loaded.load_graph(&graph_path).unwrap();
    assert_eq!(reloaded.relations().names(), kg.relations().names());
}
