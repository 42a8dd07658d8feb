use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mkgr_core::config::{TrainConfig, Variant};
use mkgr_core::dataset::{make_planted_mkg, partition_queries, sample_inductive_pair, PlantedRule, SplitParams};
use mkgr_core::eval::table;
use mkgr_core::features::{load_pretrained, synth_features, FeatureStore};
use mkgr_core::rules::mine_rules;
use mkgr_core::tensor::Matrix;
use mkgr_core::trainer::{evaluate_checkpoint, run_ablation, Checkpoint, EvalSet, TrainData, Trainer};
use mkgr_core::{Error, MultiModalKG, Triplet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "mkgr", version, about = "Multi-hop reasoning over multi-modal knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra config override, `key=value` with a JSON value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample an inductive train / ind_test pair from a triple file.
    BuildDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        /// Target share of the graph's triplets in the train graph.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        n_roots: Option<usize>,
        #[arg(long)]
        k_hops: Option<usize>,
        #[arg(long)]
        per_hop_cap: Option<usize>,
    },
    /// Generate a planted-rule graph with synthetic features and query splits.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        relations: Option<usize>,
        /// Planted rule `body1,body2=>head`. Repeatable.
        #[arg(long = "rule")]
        rules: Vec<String>,
        #[arg(long)]
        support: Option<usize>,
        #[arg(long)]
        noise: Option<usize>,
    },
    /// Mine rules from a triple file.
    MineRules {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
    },
    /// Train a model; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Training queries; defaults to every edge of the graph.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Validation queries.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Graph the validation queries are answered on; defaults to --graph.
        #[arg(long)]
        valid_graph: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank queries with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Queries to rank; defaults to every edge of the graph.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Train the full model and ablation variants; print a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Test queries.
        #[arg(long)]
        test: PathBuf,
        /// Graph the test queries are answered on; defaults to --graph.
        #[arg(long)]
        test_graph: Option<PathBuf>,
        /// Variant to compare against the full model. Repeatable; all when absent.
        #[arg(long = "variant")]
        variants: Vec<String>,
        #[arg(long)]
        beam: Option<usize>,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Triple file of the graph.
    #[arg(long)]
    graph: PathBuf,
    /// Feature blob; synthetic features are used when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Entity embedding table appended to the context.
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthConfig {
    entities: usize,
    relations: usize,
    rules: Vec<String>,
    support: usize,
    violations: usize,
    noise: usize,
    d_i: usize,
    d_t: usize,
    seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 400,
            relations: 4,
            rules: vec!["r0,r1=>r2".into()],
            support: 50,
            violations: 0,
            noise: 30,
            d_i: 8,
            d_t: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetConfig {
    target_fraction: f64,
    n_roots: usize,
    k_hops: usize,
    per_hop_cap: usize,
    seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let p = SplitParams::default();
        Self {
            target_fraction: p.target_fraction,
            n_roots: p.n_roots,
            k_hops: p.k_hops,
            per_hop_cap: p.per_hop_cap,
            seed: p.seed,
        }
    }
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config { .. } | Error::UnknownVariant(_)) => 3,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MKGR_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::BuildDataset { common, graph, fraction, n_roots, k_hops, per_hop_cap } => {
            let mut flags = Map::new();
            put(&mut flags, "target_fraction", fraction);
            put(&mut flags, "n_roots", n_roots);
            put(&mut flags, "k_hops", k_hops);
            put(&mut flags, "per_hop_cap", per_hop_cap);
            put(&mut flags, "seed", common.seed);
            let cfg: DatasetConfig = section(&common, flags)?;
            build_dataset(&common.out, &graph, &cfg)
        }
        Command::Synth { common, entities, relations, rules, support, noise } => {
            let mut flags = Map::new();
            put(&mut flags, "entities", entities);
            put(&mut flags, "relations", relations);
            put(&mut flags, "support", support);
            put(&mut flags, "noise", noise);
            put(&mut flags, "seed", common.seed);
            if !rules.is_empty() {
                flags.insert("rules".into(), Value::from(rules));
            }
            let cfg: SynthConfig = section(&common, flags)?;
            synth(&common.out, &cfg)
        }
        Command::MineRules { common, graph } => {
            let cfg = train_config(&common, Map::new())?;
            let kg = MultiModalKG::load_triples(&graph)?;
            let rules = mine_rules(&kg, &cfg.mining());
            let out = out_dir(&common.out)?;
            rules.write(out.join("rules.tsv"), kg.relations())?;
            info!("{} rules written to {}", rules.len(), out.join("rules.tsv").display());
            Ok(())
        }
        Command::Train { common, data, queries, valid, valid_graph, beam, variant, resume } => {
            let mut flags = Map::new();
            put(&mut flags, "seed", common.seed);
            put(&mut flags, "beam", beam);
            let mut cfg = train_config(&common, flags)?;
            if let Some(v) = variant {
                cfg = v.parse::<Variant>()?.apply(&cfg);
            }
            train(&common.out, cfg, &data, queries.as_deref(), valid.as_deref(), valid_graph.as_deref(), resume.as_deref())
        }
        Command::Evaluate { common, data, checkpoint, queries, beam } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            evaluate(&common.out, &ckpt, &data, queries.as_deref(), beam.unwrap_or(ckpt.config.beam))
        }
        Command::Ablate { common, data, queries, valid, test, test_graph, variants, beam } => {
            let mut flags = Map::new();
            put(&mut flags, "seed", common.seed);
            put(&mut flags, "beam", beam);
            let cfg = train_config(&common, flags)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>, Error>>()?
            };
            ablate(&common.out, &cfg, &data, queries.as_deref(), valid.as_deref(), &test, test_graph.as_deref(), &variants)
        }
    }
}

fn put<T: Serialize>(map: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        map.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

/// Config file object, then `--set` pairs, then typed flags.
fn overrides(common: &Common, flags: Map<String, Value>) -> Result<Map<String, Value>, Failure> {
    let mut map = match &common.config {
        None => Map::new(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(Error::config("<root>", "config must be a JSON object").into()),
                Err(e) => return Err(Error::config("<file>", e.to_string()).into()),
            }
        }
    };
    for pair in &common.set {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(Error::config(pair.clone(), "expected KEY=VALUE").into());
        };
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
        map.insert(k.trim().to_owned(), value);
    }
    map.extend(flags);
    Ok(map)
}

fn train_config(common: &Common, flags: Map<String, Value>) -> Result<TrainConfig, Failure> {
    Ok(TrainConfig::from_json(&Value::Object(overrides(common, flags)?))?)
}

/// Applies overrides to `T::default()` key by key so errors name the key.
fn section<T: Default + Serialize + DeserializeOwned>(common: &Common, flags: Map<String, Value>) -> Result<T, Failure> {
    let Value::Object(mut base) = serde_json::to_value(T::default())? else {
        unreachable!("sections are objects");
    };
    for (k, v) in overrides(common, flags)? {
        if !base.contains_key(&k) {
            return Err(Error::config(k, "unknown key").into());
        }
        base.insert(k.clone(), v);
        if let Err(e) = serde_json::from_value::<T>(Value::Object(base.clone())) {
            return Err(Error::config(k, e.to_string()).into());
        }
    }
    Ok(serde_json::from_value(Value::Object(base))?)
}

fn out_dir(path: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path.to_owned())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_queries(path: &Path, kg: &MultiModalKG, qs: &[Triplet]) -> anyhow::Result<()> {
    let mut text = String::new();
    for t in qs {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            kg.entity_name(t.head),
            kg.relation_name(t.relation),
            kg.entity_name(t.tail)
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_dataset(out: &Path, graph: &Path, cfg: &DatasetConfig) -> Result<(), Failure> {
    if !(cfg.target_fraction > 0.0 && cfg.target_fraction < 1.0) {
        return Err(Error::config("target_fraction", "must lie in (0, 1)").into());
    }
    if cfg.k_hops == 0 || cfg.n_roots == 0 || cfg.per_hop_cap == 0 {
        return Err(Error::config("k_hops", "n_roots, k_hops and per_hop_cap must be at least 1").into());
    }
    let kg = MultiModalKG::load_triples(graph)?;
    let params = SplitParams {
        n_roots: cfg.n_roots,
        k_hops: cfg.k_hops,
        per_hop_cap: cfg.per_hop_cap,
        target_fraction: cfg.target_fraction,
        seed: cfg.seed,
    };
    let pair = sample_inductive_pair(&kg, &params)?;
    let out = out_dir(out)?;
    pair.train.write_triples(out.join("train.tsv"))?;
    pair.test.write_triples(out.join("ind_test.tsv"))?;
    write_json(&out.join("report.json"), &pair.report)?;
    info!(
        "train {} triplets ({:.3} of the graph), ind_test {}",
        pair.report.train.triplets, pair.report.fraction, pair.report.test.triplets
    );
    Ok(())
}

fn parse_rule(s: &str) -> anyhow::Result<PlantedRule> {
    let Some((body, head)) = s.split_once("=>") else {
        bail!("rule `{s}` must look like r0,r1=>r2");
    };
    let body: Vec<&str> = body.split(',').map(str::trim).filter(|b| !b.is_empty()).collect();
    Ok(PlantedRule::new(&body, head.trim(), 0, 0))
}

fn synth(out: &Path, cfg: &SynthConfig) -> Result<(), Failure> {
    if cfg.d_i == 0 || cfg.d_t == 0 {
        return Err(Error::config("d_i", "feature dimensions must be at least 1").into());
    }
    let mut rules = Vec::new();
    for r in &cfg.rules {
        let mut rule = parse_rule(r).map_err(|e| Error::config("rules", e.to_string()))?;
        rule.support = cfg.support;
        rule.violations = cfg.violations;
        rules.push(rule);
    }
    let kg = make_planted_mkg(cfg.entities, cfg.relations, &rules, cfg.noise, cfg.seed)?;
    let feats = synth_features(&kg, cfg.seed, cfg.d_i, cfg.d_t);
    let split = partition_queries(&kg, cfg.seed);
    let out = out_dir(out)?;
    kg.write_triples(out.join("graph.tsv"))?;
    feats.save(&kg, out.join("features.bin"))?;
    write_queries(&out.join("train.tsv"), &kg, &split.train)?;
    write_queries(&out.join("valid.tsv"), &kg, &split.valid)?;
    write_queries(&out.join("test.tsv"), &kg, &split.test)?;
    write_json(&out.join("synth.json"), cfg)?;
    info!("{} triplets over {} entities", kg.num_triplets() / 2, kg.num_entities());
    Ok(())
}

struct Loaded {
    kg: MultiModalKG,
    features: FeatureStore,
    pretrained: Option<Matrix>,
}

fn load_data(args: &DataArgs, graph: &Path, ckpt: Option<&Checkpoint>, seed: u64, dims: (usize, usize)) -> anyhow::Result<Loaded> {
    let kg = match ckpt {
        Some(c) => c.load_graph(graph)?,
        None => MultiModalKG::load_triples(graph)?,
    };
    let features = match &args.features {
        Some(p) => FeatureStore::load(&kg, p)?,
        None => {
            warn!("no --features given, using synthetic features");
            synth_features(&kg, seed, dims.0, dims.1)
        }
    };
    let pretrained = args.pretrained.as_ref().map(|p| load_pretrained(&kg, p)).transpose()?;
    Ok(Loaded { kg, features, pretrained })
}

fn queries_for(kg: &MultiModalKG, path: Option<&Path>) -> anyhow::Result<Vec<Triplet>> {
    match path {
        None => Ok(kg.base_triplets().collect()),
        Some(p) => {
            let (qs, skipped) = kg.load_queries(p)?;
            if skipped > 0 {
                warn!("{skipped} queries in {} name unknown entities or relations; skipped", p.display());
            }
            if qs.is_empty() {
                bail!("no usable queries in {}", p.display());
            }
            Ok(qs)
        }
    }
}

fn default_dims(cfg: &TrainConfig) -> (usize, usize) {
    (cfg.d_i.unwrap_or(8), cfg.d_t.unwrap_or(8))
}

#[allow(clippy::too_many_arguments)]
fn train(
    out: &Path,
    cfg: TrainConfig,
    args: &DataArgs,
    queries: Option<&Path>,
    valid: Option<&Path>,
    valid_graph: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), Failure> {
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    let cfg = match &ckpt {
        Some(c) => TrainConfig { epochs: cfg.epochs.max(c.config.epochs), ..c.config.clone() },
        None => cfg,
    };
    let dims = default_dims(&cfg);
    let train_set = load_data(args, &args.graph, ckpt.as_ref(), cfg.seed, dims)?;
    let train_queries = queries_for(&train_set.kg, queries)?;
    let train_queries: Vec<Triplet> = train_queries.into_iter().filter(|q| train_set.kg.contains(*q)).collect();
    if train_queries.is_empty() {
        return Err(anyhow::anyhow!("no training query is an edge of the training graph").into());
    }
    let valid_set = match valid_graph {
        Some(g) => Some(load_data(args, g, ckpt.as_ref(), cfg.seed, dims)?),
        None => None,
    };
    let valid_kg = valid_set.as_ref().unwrap_or(&train_set);
    let valid_queries = match valid {
        Some(p) => Some(queries_for(&valid_kg.kg, Some(p))?),
        None if valid_set.is_some() => Some(queries_for(&valid_kg.kg, None)?),
        None => None,
    };
    let eval_set = valid_queries.as_ref().map(|qs| EvalSet {
        pretrained: valid_kg.pretrained.as_ref(),
        ..EvalSet::new(&valid_kg.kg, &valid_kg.features, qs)
    });
    let data = TrainData {
        kg: &train_set.kg,
        features: &train_set.features,
        pretrained: train_set.pretrained.as_ref(),
        queries: &train_queries,
        valid: eval_set,
    };
    let mut trainer = match &ckpt {
        Some(c) => {
            let mut c = c.clone();
            c.config = cfg.clone();
            Trainer::resume(&c, &data)?
        }
        None => Trainer::new(cfg.clone(), &data)?,
    };
    let out = out_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let log_path = out.join("metrics.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let result = trainer.run_with(|rec, ckpt, improved| {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        ckpt.save(out.join("last.ckpt"))?;
        if improved {
            ckpt.save(out.join("best.ckpt"))?;
        }
        Ok(())
    });
    match result {
        Ok(outcome) => {
            info!("best validation mrr {:.4}", outcome.best.best_mrr.unwrap_or(0.0));
            Ok(())
        }
        Err(Error::Diverged { epoch, what, last_good }) => {
            last_good.save(out.join("last_good.ckpt"))?;
            Err(anyhow::anyhow!("training diverged at epoch {epoch} ({what}); last good state saved to last_good.ckpt").into())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    mrr: f64,
    hits1: f64,
    hits10: f64,
    count: usize,
    skipped: usize,
    beam: usize,
    unreached_rank: &'a str,
    ranks: Vec<f64>,
}

fn evaluate(out: &Path, ckpt: &Checkpoint, args: &DataArgs, queries: Option<&Path>, beam: usize) -> Result<(), Failure> {
    let dims = (ckpt.model.d_i, ckpt.model.d_t);
    let set = load_data(args, &args.graph, Some(ckpt), ckpt.config.seed, dims)?;
    let (qs, skipped) = match queries {
        None => (set.kg.base_triplets().collect(), 0),
        Some(p) => set.kg.load_queries(p)?,
    };
    if qs.is_empty() {
        return Err(anyhow::anyhow!("no usable queries").into());
    }
    let eval = EvalSet { pretrained: set.pretrained.as_ref(), ..EvalSet::new(&set.kg, &set.features, &qs) };
    let (m, ranks) = evaluate_checkpoint(ckpt, &eval, beam)?;
    let out = out_dir(out)?;
    let report = EvalReport {
        mrr: m.mrr,
        hits1: m.hits1,
        hits10: m.hits10,
        count: m.count,
        skipped,
        beam,
        unreached_rank: "(entities + reached) / 2",
        ranks,
    };
    write_json(&out.join("metrics.json"), &report)?;
    let text = table(&[("TMR".into(), m)]);
    fs::write(out.join("table.txt"), &text).context("writing table")?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    out: &Path,
    cfg: &TrainConfig,
    args: &DataArgs,
    queries: Option<&Path>,
    valid: Option<&Path>,
    test: &Path,
    test_graph: Option<&Path>,
    variants: &[Variant],
) -> Result<(), Failure> {
    let dims = default_dims(cfg);
    let train_set = load_data(args, &args.graph, None, cfg.seed, dims)?;
    let train_queries: Vec<Triplet> = queries_for(&train_set.kg, queries)?
        .into_iter()
        .filter(|q| train_set.kg.contains(*q))
        .collect();
    let valid_queries = valid.map(|p| queries_for(&train_set.kg, Some(p))).transpose()?;
    let test_set = match test_graph {
        Some(g) => {
            let kg = MultiModalKG::load_triples_with_relations(g, train_set.kg.relations())?;
            let features = match &args.features {
                Some(p) => FeatureStore::load(&kg, p)?,
                None => synth_features(&kg, cfg.seed, dims.0, dims.1),
            };
            let pretrained = args.pretrained.as_ref().map(|p| load_pretrained(&kg, p)).transpose()?;
            Some(Loaded { kg, features, pretrained })
        }
        None => None,
    };
    let tkg = test_set.as_ref().unwrap_or(&train_set);
    let test_queries = queries_for(&tkg.kg, Some(test))?;
    let test_eval = EvalSet { pretrained: tkg.pretrained.as_ref(), ..EvalSet::new(&tkg.kg, &tkg.features, &test_queries) };
    let data = TrainData {
        kg: &train_set.kg,
        features: &train_set.features,
        pretrained: train_set.pretrained.as_ref(),
        queries: &train_queries,
        valid: valid_queries.as_ref().map(|qs| EvalSet {
            pretrained: train_set.pretrained.as_ref(),
            ..EvalSet::new(&train_set.kg, &train_set.features, qs)
        }),
    };
    let rows = run_ablation(cfg, &data, &test_eval, variants)?;
    let out = out_dir(out)?;
    let json: Vec<Value> = rows
        .iter()
        .map(|(name, m)| serde_json::json!({"model": name, "mrr": m.mrr, "hits1": m.hits1, "hits10": m.hits10, "count": m.count}))
        .collect();
    write_json(&out.join("ablation.json"), &json)?;
    let text = table(&rows);
    fs::write(out.join("table.txt"), &text).context("writing table")?;
    print!("{text}");
    Ok(())
}
