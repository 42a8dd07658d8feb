use std::collections::{BTreeSet, HashSet};

use mkgr_core::autodiff::Graph;
use mkgr_core::dataset::{sample_inductive_pair, verify_pair, SplitParams};
use mkgr_core::discriminator::{adaptive_reward, DemoPath, DiscConfig, Discriminator, LevelScores, RewardMode};
use mkgr_core::env::{Env, EnvConfig, Query, UniformPolicy};
use mkgr_core::eval::{metrics, rank_of};
use mkgr_core::kg::{EdgeMask, EntityId, KgBuilder, MultiModalKG, RelationId, RelationVocab, Triplet};
use mkgr_core::params::ParamStore;
use mkgr_core::policy::{sample_action, Sampling};
use mkgr_core::rules::{augment_actions, confidence, mine_rules, MiningConfig};
use mkgr_core::tair::{encode, relation_query_attention, TairConfig, TairParams};
use mkgr_core::tensor::{softmax, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn edges(max_e: u32, max_r: u32, max_len: usize) -> impl Strategy<Value = Vec<(u32, u32, u32)>> {
    prop::collection::vec((0..max_e, 0..max_r, 0..max_e), 1..max_len)
}

fn graph(edges: &[(u32, u32, u32)]) -> MultiModalKG {
    let names: Vec<(String, String, String)> = edges
        .iter()
        .map(|(h, r, t)| (format!("e{h}"), format!("r{r}"), format!("e{t}")))
        .collect();
    MultiModalKG::from_named_triples(names.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())))
}

/// Endpoint pairs of a relation path by nested scans over the triplet list.
fn brute_pairs(kg: &MultiModalKG, body: &[RelationId]) -> BTreeSet<(EntityId, EntityId)> {
    let mut frontier: BTreeSet<(EntityId, EntityId)> = kg.entities().map(|e| (e, e)).collect();
    for &r in body {
        let mut next = BTreeSet::new();
        for &(a, b) in &frontier {
            for t in kg.triplets() {
                if t.head == b && t.relation == r {
                    next.insert((a, t.tail));
                }
            }
        }
        frontier = next;
    }
    frontier
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_is_inverse_closed_and_adjacency_matches_scan(es in edges(12, 4, 40)) {
        let kg = graph(&es);
        let set: HashSet<Triplet> = kg.triplets().iter().copied().collect();
        for t in kg.triplets() {
            prop_assert!(set.contains(&Triplet::new(t.tail, kg.inverse_of(t.relation), t.head)));
            prop_assert_eq!(kg.inverse_of(kg.inverse_of(t.relation)), t.relation);
        }
        let mut rebuilt = HashSet::new();
        for e in kg.entities() {
            let out: Vec<(RelationId, EntityId)> = kg.outgoing(e).unwrap().to_vec();
            let mut scan_out: Vec<(RelationId, EntityId)> =
                kg.triplets().iter().filter(|t| t.head == e).map(|t| (t.relation, t.tail)).collect();
            scan_out.sort();
            prop_assert_eq!(&out, &scan_out);
            let mut scan_in: Vec<(RelationId, EntityId)> =
                kg.triplets().iter().filter(|t| t.tail == e).map(|t| (t.relation, t.head)).collect();
            scan_in.sort();
            prop_assert_eq!(kg.incoming(e).unwrap().to_vec(), scan_in);
            rebuilt.extend(out.into_iter().map(|(r, t)| Triplet::new(e, r, t)));
        }
        prop_assert_eq!(rebuilt, set);
    }

    #[test]
    fn mined_rules_match_brute_force_counts(es in edges(10, 3, 30), min_support in 1usize..4) {
        let kg = graph(&es);
        let cfg = MiningConfig { max_body_len: 2, min_support, min_conf: 0.0 };
        let index = mine_rules(&kg, &cfg);
        for rule in index.iter() {
            let pairs = brute_pairs(&kg, &rule.body);
            let pos = pairs.iter().filter(|&&(a, b)| kg.contains(Triplet::new(a, rule.head, b))).count();
            prop_assert_eq!((rule.pos, rule.neg), (pos, pairs.len() - pos));
            prop_assert!(rule.pos >= min_support);
            prop_assert!((0.0..=1.0).contains(&rule.confidence));
        }
        prop_assert_eq!(mine_rules(&kg, &cfg).to_lines(kg.relations()), index.to_lines(kg.relations()));
    }

    #[test]
    fn confidence_is_bounded_and_falls_with_counterexamples(pos in 0usize..50, neg in 0usize..50) {
        let c = confidence(pos, neg);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!(confidence(pos, neg + 1) <= c);
    }

    #[test]
    fn augmentation_never_repeats_an_original(es in edges(8, 3, 30), start in 0u32..8) {
        let kg = graph(&es);
        let index = mine_rules(&kg, &MiningConfig { max_body_len: 2, min_support: 1, min_conf: 0.0 });
        let Ok(e) = kg.entity_id(&format!("e{start}")) else { return Ok(()) };
        let originals: HashSet<(RelationId, EntityId)> = kg.outgoing(e).unwrap().iter().copied().collect();
        let selected: Vec<RelationId> = kg.relation_ids().collect();
        let aug = augment_actions(&kg, e, &selected, &index, 5, &originals, EdgeMask::default());
        for a in &aug {
            prop_assert!(!originals.contains(a));
        }
        let again = augment_actions(&kg, e, &selected, &index, 5, &originals, EdgeMask::default());
        prop_assert_eq!(aug, again);
    }

    #[test]
    fn rollouts_have_full_length_and_stop_is_always_offered(es in edges(8, 3, 25), seed in 0u64..1000, l in 1usize..5) {
        let kg = graph(&es);
        let cfg = EnvConfig { max_steps: l, max_actions: 4 };
        let env = Env::new(&kg, &cfg);
        let t = kg.triplets()[0];
        let traj = env
            .rollout(&mut UniformPolicy, &Query::from_triplet(t), &mut ChaCha8Rng::seed_from_u64(seed), Sampling::Sample)
            .unwrap();
        prop_assert_eq!(traj.steps.len(), l);
        for s in &traj.steps {
            prop_assert!(!s.actions.is_empty() && s.actions.len() <= 4);
            prop_assert!(s.actions.last().unwrap().relation.is_stop());
        }
        prop_assert_eq!(traj.terminal.step, l);
    }

    #[test]
    fn inductive_pairs_are_disjoint_and_relation_contained(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let es: Vec<(u32, u32, u32)> = (0..400).map(|_| (rng.gen_range(0..150), rng.gen_range(0..5), rng.gen_range(0..150))).collect();
        let kg = graph(&es);
        let params = SplitParams { target_fraction: 0.1, seed, ..SplitParams::default() };
        if let Ok(pair) = sample_inductive_pair(&kg, &params) {
            prop_assert!(verify_pair(&pair).is_ok());
            let again = sample_inductive_pair(&kg, &params).unwrap();
            prop_assert_eq!(pair.train.named_triplets(), again.train.named_triplets());
            prop_assert_eq!(pair.test.named_triplets(), again.test.named_triplets());
        }
    }

    #[test]
    fn softmax_is_a_distribution_and_argmax_ignores_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        prop_assert_eq!(
            sample_action(&p, &mut rng, Sampling::Greedy),
            sample_action(&softmax(&shifted), &mut rng, Sampling::Greedy)
        );
        let mut g = Graph::new();
        let n = logits.len();
        let m = g.constant(Matrix::from_vec(1, n, logits));
        let s = g.softmax_rows(m);
        prop_assert!((g.value(s).sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rewards_lie_in_unit_interval_and_rise_with_the_path_score(
        a in 1e-9f64..1.0, b in 1e-9f64..1.0, na in 1e-9f64..1.0, nb in 1e-9f64..1.0, alpha in 0.0f64..=1.0,
    ) {
        let lo = LevelScores { relation: a.min(b), relation_noise: na, entity: 0.5, entity_noise: nb };
        let hi = LevelScores { relation: a.max(b), ..lo };
        for mode in [RewardMode::Adaptive, RewardMode::RelationOnly, RewardMode::EntityOnly] {
            let r = adaptive_reward(hi, alpha, mode);
            prop_assert!((0.0..1.0).contains(&r));
            prop_assert!(adaptive_reward(lo, alpha, mode) <= r);
        }
    }

    #[test]
    fn counterfactual_filter_returns_a_subset(seed in 0u64..10_000, n in 1usize..6, k in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Discriminator::new(DiscConfig::new(4, n, 3, 2), 6, &mut rng).unwrap();
        use rand::Rng;
        let demos: Vec<DemoPath> = (0..k)
            .map(|_| DemoPath {
                relations: (0..rng.gen_range(1..=3)).map(|_| RelationId(rng.gen_range(0..6))).collect(),
                entities: vec![],
            })
            .collect();
        let f = d.counterfactual_filter(&demos, RelationId(0));
        let limit = k.min(n);
        prop_assert!(f.kept.iter().all(|&i| i < limit));
        prop_assert!(f.kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(d.counterfactual_filter(&demos, RelationId(0)), f);
    }

    #[test]
    fn ranking_metrics_are_ordered_and_filtering_helps(
        scores in prop::collection::vec(-5.0f64..0.0, 1..20),
        target in 0u32..25,
        filt in prop::collection::btree_set(0u32..25, 0..10),
    ) {
        let cands: Vec<(EntityId, f64)> = scores.iter().enumerate().map(|(i, &s)| (EntityId(i as u32), s)).collect();
        let t = EntityId(target);
        let filtered: HashSet<EntityId> = filt.into_iter().map(EntityId).collect();
        let raw = rank_of(t, &cands, &HashSet::new(), 25);
        let f = rank_of(t, &cands, &filtered, 25);
        prop_assert!(f <= raw && f >= 1.0);
        let ranks: Vec<f64> = scores.iter().map(|s| 1.0 + (-s * 3.0).floor()).collect();
        let m = metrics(&ranks).unwrap();
        prop_assert!(m.hits1 <= m.mrr && m.mrr <= 1.0 && m.hits1 <= m.hits10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_entity_independent_and_bounded(es in edges(9, 3, 24), seed in 0u64..1000, perm_seed in 0u64..1000) {
        let kg = graph(&es);
        let mut vocab = RelationVocab::new();
        for name in kg.relations().names() {
            vocab.intern(name);
        }
        let mut names: Vec<String> = kg.entities().map(|e| kg.entity_name(e).to_owned()).collect();
        use rand::seq::SliceRandom;
        names.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let mut b = KgBuilder::with_relations(vocab);
        for n in &names {
            b.add_entity(n);
        }
        for t in kg.base_triplets() {
            b.add(kg.entity_name(t.head), kg.relation_name(t.relation), kg.entity_name(t.tail));
        }
        let renamed = b.build();
        prop_assert_eq!(renamed.relations().names(), kg.relations().names());

        let mut store = ParamStore::new();
        let cfg = TairConfig { d: 4, layers: 2, attentive: true, neighbor_state: false };
        let p = TairParams::new(&mut store, cfg, kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(seed));
        let r_q = kg.triplets()[0].relation;
        let (a, ta) = encode(&kg, r_q, &store, &p).unwrap();
        let (b, tb) = encode(&renamed, r_q, &store, &p).unwrap();
        prop_assert_eq!(ta, tb);
        for e in kg.entities() {
            let f = renamed.entity_id(kg.entity_name(e)).unwrap();
            for (x, y) in a.row(e.index()).iter().zip(b.row(f.index())) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(x.abs() < 1.0);
            }
        }

        let table = store.get(p.table);
        for e in kg.entities() {
            let rels: Vec<RelationId> = kg.incoming(e).unwrap().iter().chain(kg.outgoing(e).unwrap()).map(|&(r, _)| r).collect();
            if !rels.is_empty() {
                let w = relation_query_attention(&rels, r_q, table).unwrap();
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
