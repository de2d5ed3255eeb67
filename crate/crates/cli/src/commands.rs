//! Subcommand bodies. Each one resolves its settings, loads and checks
//! every input, and only then creates the run directory and computes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use deeplinker::eval::{
    attention_rank, betweenness, classify_eval, closeness, degree, export_embeddings,
    hit_accuracy, load_binary_truth, load_real_truth, pagerank, read_embeddings,
    spearman_against, write_embeddings, CentralityVector, ClassifyConfig, GroundTruth,
    MetricsReport, RankingScores,
};
use deeplinker::graph::{
    build_neighbor_table, load_graph, load_labels, remove_edges, split_edges, EdgeSplit,
    FeatureSource, Graph, GraphError, IdMap, NeighborTable,
};
use deeplinker::model::{AttentionMode, Checkpoint, ModelConfig};
use deeplinker::trainer::{link_metrics, train as fit, training_graph, TrainConfig, TrainError};

use crate::config::Resolver;
use crate::failure::Failure;
use crate::{GraphArgs, ModelArgs, RunArgs, SplitArgs, TrainArgs};

const PAGERANK_DAMPING: f64 = 0.85;
const PAGERANK_TOL: f64 = 1e-10;
const DEFAULT_METHODS: &str = "attention,pagerank,closeness,betweenness";

fn graph_failure(e: GraphError) -> Failure {
    match e {
        GraphError::Fraction(_) | GraphError::EmptySplit(_) | GraphError::TooDense { .. } => {
            Failure::config(e)
        }
        _ => Failure::input(e),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_) => Failure::config(e),
        _ => Failure::runtime(e),
    }
}

/// Settings every command shares, plus the resolver that recorded them.
struct Run {
    command: &'static str,
    resolver: Resolver,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn start(command: &'static str, args: RunArgs) -> Result<Self, Failure> {
        let mut resolver = Resolver::load(args.config.as_deref())?;
        let seed = resolver.value("seed", args.seed, 0u64)?;
        let threads = resolver.value("threads", args.threads, 1usize)?;
        if threads == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        let out = match resolver.path("out", args.out)? {
            Some(p) => p,
            None => {
                let secs = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                PathBuf::from(format!("runs/{command}-{secs}"))
            }
        };
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(Failure::runtime)?;
        Ok(Self {
            command,
            resolver,
            seed,
            out,
        })
    }

    /// Creates the run directory and records the resolved settings. Called
    /// once all inputs have been validated.
    fn open(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.out).map_err(|e| {
            Failure::runtime(format!("cannot create {}: {e}", self.out.display()))
        })?;
        self.write("resolved_config.json", &self.resolver.to_json(self.command))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, contents)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
    }

    fn report(&self, report: &MetricsReport) -> Result<(), Failure> {
        let json = report.to_json();
        self.write("metrics.json", &(json.clone() + "\n"))?;
        println!("{json}");
        Ok(())
    }
}

fn existing(key: &str, path: PathBuf) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::input(format!("--{key}: no such file {}", path.display())))
    }
}

fn required_file(r: &mut Resolver, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    existing(key, r.required_path(key, flag)?)
}

fn optional_file(
    r: &mut Resolver,
    key: &str,
    flag: Option<PathBuf>,
) -> Result<Option<PathBuf>, Failure> {
    r.path(key, flag)?.map(|p| existing(key, p)).transpose()
}

/// Edge list and features, loaded.
fn load_input_graph(r: &mut Resolver, args: &GraphArgs) -> Result<Graph, Failure> {
    let edges = required_file(r, "edges", args.edges.clone())?;
    let features = r.value("features", args.features.clone(), "onehot".to_owned())?;
    let source = if features == "onehot" {
        FeatureSource::OneHot
    } else {
        FeatureSource::File(existing("features", PathBuf::from(features))?)
    };
    load_graph(&edges, &source).map_err(graph_failure)
}

fn read_split(path: &Path, g: &Graph) -> Result<EdgeSplit, Failure> {
    let split = EdgeSplit::read(path).map_err(graph_failure)?;
    split.validate_against(g).map_err(graph_failure)?;
    Ok(split)
}

/// The split file if one was given, otherwise a fresh split of `g`.
fn resolve_split(
    run: &mut Run,
    split_flag: Option<PathBuf>,
    fracs: &SplitArgs,
    g: &Graph,
) -> Result<EdgeSplit, Failure> {
    match optional_file(&mut run.resolver, "split", split_flag)? {
        Some(path) => read_split(&path, g),
        None => {
            let test = run.resolver.value("test-frac", fracs.test_frac, 0.10)?;
            let val = run.resolver.value("val-frac", fracs.val_frac, 0.05)?;
            split_edges(g, test, val, run.seed).map_err(graph_failure)
        }
    }
}

fn resolve_model(r: &mut Resolver, args: &ModelArgs) -> Result<ModelConfig, Failure> {
    let d = ModelConfig::new(0);
    let attention: AttentionMode = r.value(
        "attention",
        args.attention.as_deref().map(parse_attention).transpose()?,
        d.attention,
    )?;
    Ok(ModelConfig {
        in_dim: 0,
        heads1: r.value("heads1", args.heads1, d.heads1)?,
        hidden: r.value("hidden", args.hidden, d.hidden)?,
        heads2: r.value("heads2", args.heads2, d.heads2)?,
        embed_dim: r.value("embed-dim", args.embed_dim, d.embed_dim)?,
        sample_size: r.value("sample-size", args.sample_size, d.sample_size)?,
        attention,
    })
}

fn parse_attention(s: &str) -> Result<AttentionMode, Failure> {
    s.parse()
        .map_err(|e: String| Failure::config(format!("invalid attention: {e}")))
}

fn resolve_train(r: &mut Resolver, args: &TrainArgs, seed: u64) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let config = TrainConfig {
        learning_rate: r.value("lr", args.lr, d.learning_rate)?,
        batch_size: r.value("batch-size", args.batch_size, d.batch_size)?,
        max_epochs: r.value("max-epochs", args.max_epochs, d.max_epochs)?,
        patience: r.value("patience", args.patience, d.patience)?,
        dropout: r.value("dropout", args.dropout, d.dropout)?,
        seed,
        ..d
    };
    config.validate().map_err(Failure::config)?;
    Ok(config)
}

/// Neighbor table for a checkpoint: same training edges, sample size and
/// seed as when it was trained.
fn checkpoint_inputs(
    ckpt: &Checkpoint,
    g: &Graph,
    split: &EdgeSplit,
) -> Result<(NeighborTable, Graph), Failure> {
    let train_g = training_graph(g, split).map_err(graph_failure)?;
    let config = &ckpt.params.config;
    if train_g.features().dim() != config.in_dim {
        return Err(Failure::config(format!(
            "checkpoint expects {} input features but the graph provides {}",
            config.in_dim,
            train_g.features().dim()
        )));
    }
    let table = build_neighbor_table(g, &split.train_pos, config.sample_size, ckpt.table_seed)
        .map_err(graph_failure)?;
    Ok((table, train_g))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::read(path).map_err(Failure::input)
}

/// Trains on `g` with `split`, writing checkpoint, history and split into
/// the run directory; returns the best checkpoint and the test metrics.
fn train_and_test(
    run: &Run,
    g: &Graph,
    split: &EdgeSplit,
    mut model: ModelConfig,
    config: &TrainConfig,
) -> Result<(Checkpoint, MetricsReport), Failure> {
    model.in_dim = g.features().dim();
    model.validate().map_err(Failure::config)?;
    run.open()?;
    g.ids()
        .write(&run.path("id_map.tsv"))
        .map_err(Failure::runtime)?;
    split
        .write(&run.path("split.json"))
        .map_err(Failure::runtime)?;
    let table = build_neighbor_table(g, &split.train_pos, model.sample_size, run.seed)
        .map_err(graph_failure)?;
    let outcome = fit(
        g,
        split,
        &table,
        model,
        config,
        Some(&run.path("checkpoint.dlnk")),
    )
    .map_err(train_failure)?;
    outcome
        .history
        .write(&run.path("history.json"))
        .map_err(Failure::runtime)?;
    let mut report = MetricsReport::default();
    if !split.test_pos.is_empty() {
        let train_g = training_graph(g, split).map_err(graph_failure)?;
        let (acc, auc) = link_metrics(
            &outcome.checkpoint.params,
            &table,
            train_g.features(),
            &split.test_pos,
            &split.test_neg,
        )
        .map_err(train_failure)?;
        report.accuracy = Some(acc);
        report.auc = Some(auc);
    }
    Ok((outcome.checkpoint, report))
}

pub fn split(args: RunArgs, graph: GraphArgs, fracs: SplitArgs) -> Result<(), Failure> {
    let mut run = Run::start("split", args)?;
    let g = load_input_graph(&mut run.resolver, &graph)?;
    let split = resolve_split(&mut run, None, &fracs, &g)?;
    run.open()?;
    g.ids()
        .write(&run.path("id_map.tsv"))
        .map_err(Failure::runtime)?;
    split
        .write(&run.path("split.json"))
        .map_err(Failure::runtime)?;
    let summary = serde_json::json!({
        "nodes": g.num_nodes(),
        "edges": g.num_edges(),
        "train_pos": split.train_pos.len(),
        "val_pos": split.val_pos.len(),
        "test_pos": split.test_pos.len(),
    });
    run.write("summary.json", &(summary.to_string() + "\n"))?;
    println!("{summary}");
    Ok(())
}

pub fn train(
    args: RunArgs,
    graph: GraphArgs,
    fracs: SplitArgs,
    model: ModelArgs,
    train: TrainArgs,
) -> Result<(), Failure> {
    let mut run = Run::start("train", args)?;
    let g = load_input_graph(&mut run.resolver, &graph)?;
    let split = resolve_split(&mut run, graph.split.clone(), &fracs, &g)?;
    let model = resolve_model(&mut run.resolver, &model)?;
    let config = resolve_train(&mut run.resolver, &train, run.seed)?;
    let (_, report) = train_and_test(&run, &g, &split, model, &config)?;
    run.report(&report)
}

pub fn evaluate(
    args: RunArgs,
    graph: GraphArgs,
    checkpoint: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut run = Run::start("evaluate", args)?;
    let ckpt_path = required_file(&mut run.resolver, "checkpoint", checkpoint)?;
    let split_path = required_file(&mut run.resolver, "split", graph.split.clone())?;
    let g = load_input_graph(&mut run.resolver, &graph)?;
    let split = read_split(&split_path, &g)?;
    if split.test_pos.is_empty() {
        return Err(Failure::input("the split has no test edges"));
    }
    let ckpt = read_checkpoint(&ckpt_path)?;
    let (table, train_g) = checkpoint_inputs(&ckpt, &g, &split)?;
    run.open()?;
    let (acc, auc) = link_metrics(
        &ckpt.params,
        &table,
        train_g.features(),
        &split.test_pos,
        &split.test_neg,
    )
    .map_err(train_failure)?;
    run.report(&MetricsReport {
        accuracy: Some(acc),
        auc: Some(auc),
        ..Default::default()
    })
}

pub struct RankArgs {
    pub checkpoint: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub truth_kind: Option<String>,
    pub methods: Option<String>,
    pub k: Option<usize>,
    pub attention: Option<String>,
}

const RANK_METHODS: &[&str] = &["attention", "pagerank", "closeness", "betweenness", "degree"];

pub fn rank(args: RunArgs, graph: GraphArgs, rank: RankArgs) -> Result<(), Failure> {
    let mut run = Run::start("rank", args)?;
    let r = &mut run.resolver;
    let methods = r.value("methods", rank.methods, DEFAULT_METHODS.to_owned())?;
    let methods: Vec<String> = methods
        .split(',')
        .map(|m| m.trim().to_owned())
        .filter(|m| !m.is_empty())
        .collect();
    if methods.is_empty() {
        return Err(Failure::config("--methods is empty"));
    }
    for m in &methods {
        if !RANK_METHODS.contains(&m.as_str()) {
            return Err(Failure::config(format!(
                "unknown method {m:?} (expected one of {})",
                RANK_METHODS.join(", ")
            )));
        }
    }
    let wants_attention = methods.iter().any(|m| m == "attention");
    let flag_mode = r
        .optional::<String>("attention", rank.attention)?
        .map(|s| parse_attention(&s))
        .transpose()?;
    if wants_attention && flag_mode == Some(AttentionMode::AllOnes) {
        return Err(Failure::config(
            "--attention all_ones has no attention coefficients to rank by",
        ));
    }
    let truth_kind = r.value("truth-kind", rank.truth_kind, "binary".to_owned())?;
    if truth_kind != "binary" && truth_kind != "real" {
        return Err(Failure::config(format!(
            "--truth-kind must be binary or real, got {truth_kind:?}"
        )));
    }
    let truth_path = required_file(r, "truth", rank.truth)?;
    let k = r.optional::<usize>("k", rank.k)?;
    let ckpt = match optional_file(r, "checkpoint", rank.checkpoint)? {
        Some(p) => Some(read_checkpoint(&p)?),
        None if wants_attention => {
            return Err(Failure::usage("the attention method needs --checkpoint"))
        }
        None => None,
    };
    if let Some(c) = &ckpt {
        let mode = c.params.config.attention;
        if wants_attention && mode == AttentionMode::AllOnes {
            return Err(Failure::config(
                "the checkpoint uses all_ones attention, which has no attention coefficients to rank by",
            ));
        }
        if let Some(flag) = flag_mode {
            if flag != mode {
                return Err(Failure::config(format!(
                    "--attention {flag} conflicts with the checkpoint's {mode} attention"
                )));
            }
        }
    }
    let split_path = optional_file(r, "split", graph.split.clone())?;
    let g = load_input_graph(r, &graph)?;
    // Rank on the graph the model saw: training edges when a split is given.
    let rank_g = match &split_path {
        Some(p) => training_graph(&g, &read_split(p, &g)?).map_err(graph_failure)?,
        None => g.clone(),
    };
    if let Some(c) = &ckpt {
        if rank_g.features().dim() != c.params.config.in_dim {
            return Err(Failure::config(format!(
                "checkpoint expects {} input features but the graph provides {}",
                c.params.config.in_dim,
                rank_g.features().dim()
            )));
        }
    }
    let truth = match truth_kind.as_str() {
        "binary" => load_binary_truth(&truth_path, g.ids()),
        _ => load_real_truth(&truth_path, g.ids()),
    }
    .map_err(graph_failure)?;
    if let Some(k) = k {
        if k == 0 || k > g.num_nodes() {
            return Err(Failure::config(format!(
                "--k must be between 1 and {}",
                g.num_nodes()
            )));
        }
    }
    run.open()?;

    let mut vectors: Vec<CentralityVector> = Vec::new();
    for m in &methods {
        vectors.push(match m.as_str() {
            "attention" => attention_rank(
                &ckpt.as_ref().expect("checked above").params,
                &rank_g,
            )
            .map_err(Failure::runtime)?,
            "pagerank" => pagerank(&rank_g, PAGERANK_DAMPING, PAGERANK_TOL),
            "closeness" => closeness(&rank_g),
            "betweenness" => betweenness(&rank_g),
            _ => degree(&rank_g),
        });
    }
    let mut report = MetricsReport::default();
    for c in &vectors {
        let scores = match &truth {
            GroundTruth::Binary(set) => RankingScores {
                hit_accuracy: Some(
                    hit_accuracy(c, set, k.unwrap_or(set.len())).map_err(Failure::runtime)?,
                ),
                spearman: None,
            },
            GroundTruth::Real(pairs) => RankingScores {
                hit_accuracy: None,
                spearman: Some(spearman_against(c, pairs).map_err(Failure::runtime)?),
            },
        };
        report.centrality.insert(c.method.clone(), scores);
    }
    run.write("scores.tsv", &score_table(g.ids(), &vectors))?;
    run.report(&report)
}

fn score_table(ids: &IdMap, vectors: &[CentralityVector]) -> String {
    let mut out = String::from("node");
    for c in vectors {
        out.push('\t');
        out.push_str(&c.method);
    }
    out.push('\n');
    for v in 0..ids.len() {
        out.push_str(ids.name(v));
        for c in vectors {
            out.push('\t');
            out.push_str(&c.scores[v].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn embed(args: RunArgs, graph: GraphArgs, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let mut run = Run::start("embed", args)?;
    let ckpt_path = required_file(&mut run.resolver, "checkpoint", checkpoint)?;
    let split_path = required_file(&mut run.resolver, "split", graph.split.clone())?;
    let g = load_input_graph(&mut run.resolver, &graph)?;
    let split = read_split(&split_path, &g)?;
    let ckpt = read_checkpoint(&ckpt_path)?;
    let (table, train_g) = checkpoint_inputs(&ckpt, &g, &split)?;
    run.open()?;
    let text = export_embeddings(&ckpt.params, &table, train_g.features(), g.ids())
        .map_err(Failure::runtime)?;
    let path = run.path("embeddings.txt");
    write_embeddings(&path, &text).map_err(Failure::runtime)?;
    println!("{}", serde_json::json!({ "embeddings": path.display().to_string(), "nodes": g.num_nodes() }));
    Ok(())
}

fn parse_fractions(raw: &str) -> Result<Vec<f64>, Failure> {
    raw.split(',')
        .map(|f| {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| Failure::config(format!("invalid fraction {f:?}: {e}")))?;
            if v > 0.0 && v < 1.0 {
                Ok(v)
            } else {
                Err(Failure::config(format!("fraction {v} must lie in (0, 1)")))
            }
        })
        .collect()
}

pub fn classify(
    args: RunArgs,
    embeddings: Option<PathBuf>,
    labels: Option<PathBuf>,
    fractions: Option<String>,
    repeats: Option<usize>,
) -> Result<(), Failure> {
    let mut run = Run::start("classify", args)?;
    let r = &mut run.resolver;
    let emb_path = required_file(r, "embeddings", embeddings)?;
    let labels_path = required_file(r, "labels", labels)?;
    let d = ClassifyConfig::default();
    let default_fracs = d
        .fractions
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let fractions = parse_fractions(&r.value("fractions", fractions, default_fracs)?)?;
    let repeats = r.value("repeats", repeats, d.repeats)?;
    if repeats == 0 {
        return Err(Failure::config("--repeats must be at least 1"));
    }
    let (names, emb) = read_embeddings(&emb_path).map_err(graph_failure)?;
    let mut ids = IdMap::new();
    for name in &names {
        ids.intern(name);
    }
    if ids.len() != names.len() {
        return Err(Failure::input(format!(
            "{}: duplicate node ids",
            emb_path.display()
        )));
    }
    let (labels, _classes) = load_labels(&labels_path, &ids).map_err(graph_failure)?;
    let config = ClassifyConfig {
        fractions,
        repeats,
        seed: run.seed,
        ..d
    };
    run.open()?;
    let results = classify_eval(&emb, &labels, &config).map_err(Failure::runtime)?;
    let mut report = MetricsReport::default();
    for (f, score) in results {
        report.micro_f1.insert(f.to_string(), score);
    }
    run.report(&report)
}

pub fn robustness(
    args: RunArgs,
    graph: GraphArgs,
    fracs: SplitArgs,
    model: ModelArgs,
    train: TrainArgs,
    break_frac: Option<f64>,
) -> Result<(), Failure> {
    let mut run = Run::start("robustness", args)?;
    if graph.split.is_some() {
        return Err(Failure::config(
            "robustness splits the broken graph itself; --split is not accepted",
        ));
    }
    let frac = run.resolver.value("break-frac", break_frac, 0.2)?;
    let g = load_input_graph(&mut run.resolver, &graph)?;
    let broken = remove_edges(&g, frac, run.seed).map_err(graph_failure)?;
    let split = resolve_split(&mut run, None, &fracs, &broken)?;
    let model = resolve_model(&mut run.resolver, &model)?;
    let config = resolve_train(&mut run.resolver, &train, run.seed)?;
    let (_, report) = train_and_test(&run, &broken, &split, model, &config)?;
    run.report(&report)
}
