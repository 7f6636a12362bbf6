//! The pipeline stages. Each reads its upstream artifacts from the output
//! directory, checks their config hashes and writes its own artifacts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use golden_layer::attribution::{cma_scores, lga_scores, select_layer, LayerScoreTable, Method};
use golden_layer::corpus::{
    build_edit_set, edits_from_jsonl, edits_to_jsonl, generate_world, jsonl_header, split_proxy_test, EditQuery,
    FactWorld,
};
use golden_layer::editors::{apply_edit, estimate_covariances, CovarianceEstimate, EditorKind, EditorSpec};
use golden_layer::eval::{
    comparison_csv, evaluate_at_layer, evaluate_edit, heatmap_csv, layer_sweep, proxy_generalization_from,
    runtime_benchmark, ComparisonRow, MetricVector, ProxyReport, RuntimeRecord, SweepReport,
};
use golden_layer::model::{read_checkpoint, train_memorize, write_checkpoint, ToyModel, TrainOutcome};
use golden_layer::par::Exec;

use crate::config::{hash_tag, RunConfig};
use crate::error::{CliError, Result};

pub const VOCAB: &str = "vocab.txt";
pub const WORLD: &str = "world.json";
pub const EDITS: &str = "edits.jsonl";
pub const MODEL: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const OUTCOMES: &str = "outcomes.csv";
pub const SWEEP_REPORT: &str = "sweep_report.json";
pub const HEATMAP: &str = "heatmap.csv";
pub const PROXY_REPORT: &str = "proxy_report.json";
pub const EDIT_METRICS: &str = "edit_metrics.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const RUNTIME: &str = "runtime.json";

pub fn scores_file(method: Method) -> &'static str {
    match method {
        Method::Lga => "scores_lga.json",
        Method::Cma => "scores_cma.json",
        Method::BruteForce => "scores_bf.json",
    }
}

pub fn edited_checkpoint(kind: EditorKind, layer: usize) -> String {
    format!("edited_{kind}_L{layer}.ckpt")
}

/// A resolved configuration plus execution settings.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub exec: Exec,
}

impl Context {
    pub fn new(config: RunConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, exec })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }
}

/// Layer argument of `edit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerChoice {
    Index(usize),
    Lga,
    Cma,
}

impl FromStr for LayerChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lga" => Ok(LayerChoice::Lga),
            "cma" => Ok(LayerChoice::Cma),
            _ => s
                .parse()
                .map(LayerChoice::Index)
                .map_err(|_| format!("expected a layer index, `lga` or `cma`, got `{s}`")),
        }
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerChoice::Index(l) => write!(f, "{l}"),
            LayerChoice::Lga => f.write_str("lga"),
            LayerChoice::Cma => f.write_str("cma"),
        }
    }
}

/// A JSON artifact body tagged with the config hash that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
        _ => CliError::io(path, e),
    })
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_bytes(path)?).map_err(|e| CliError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
}

fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(CliError::ConfigMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        })
    }
}

fn write_stamped<T: Serialize>(path: &Path, hash: &str, body: T) -> Result<()> {
    let doc = Stamped {
        config_hash: hash.to_string(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("artifact serializes");
    text.push('\n');
    write(path, text)
}

fn read_stamped<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = read_text(path)?;
    let doc: Stamped<T> = serde_json::from_str(&text).map_err(|e| golden_layer::Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    check_hash(path, &doc.config_hash, expected)?;
    Ok(doc.body)
}

#[derive(Serialize, Deserialize)]
struct WorldFile {
    world: serde_json::Value,
}

pub fn load_world(ctx: &Context) -> Result<FactWorld> {
    let path = ctx.path(WORLD);
    let doc: WorldFile = read_stamped(&path, &ctx.config.gen_hash())?;
    Ok(FactWorld::from_json(&doc.world.to_string())?)
}

pub fn load_edits(ctx: &Context, world: &FactWorld) -> Result<Vec<EditQuery>> {
    let path = ctx.path(EDITS);
    let text = read_text(&path)?;
    let header = jsonl_header(&text);
    let found = header
        .iter()
        .find_map(|h| h.strip_prefix("config_hash: "))
        .unwrap_or("none");
    check_hash(&path, found, &ctx.config.gen_hash())?;
    let edits = edits_from_jsonl(&text, &world.vocab)?;
    for e in &edits {
        e.validate(&world.vocab, ctx.config.model.context_len)?;
    }
    Ok(edits)
}

pub fn load_model(ctx: &Context, world: &FactWorld) -> Result<ToyModel> {
    let path = ctx.path(MODEL);
    let expected = ctx.config.model_config(world.vocab.len());
    let (model, tag) = read_checkpoint(&read_bytes(&path)?, Some(&expected))?;
    check_hash(&path, &format!("{tag:016x}"), &ctx.config.train_hash())?;
    Ok(model)
}

/// Proxy and test halves of the edit set.
pub fn split(ctx: &Context, edits: &[EditQuery]) -> Result<(Vec<EditQuery>, Vec<EditQuery>)> {
    let e = &ctx.config.edits;
    Ok(split_proxy_test(edits, e.proxy_fraction, e.split_seed)?)
}

pub fn covariances(ctx: &Context, model: &ToyModel, world: &FactWorld) -> Result<Vec<CovarianceEstimate>> {
    let e = &ctx.config.editor;
    Ok(estimate_covariances(
        model,
        &world.training_sequences(),
        &world.entities,
        e.covariance_reg,
        e.covariance_site,
        ctx.exec,
    )?)
}

fn write_resolved_config(ctx: &Context) -> Result<()> {
    write(&ctx.path(RESOLVED_CONFIG), ctx.config.to_toml())
}

/// Writes the vocabulary, world and edit set.
pub fn cmd_gen(ctx: &Context) -> Result<String> {
    let c = &ctx.config;
    let world = generate_world(c.seed, c.world.n_entities, c.world.n_relations, c.world.n_facts)?;
    let edits = build_edit_set(&world, c.edits.n_edits, c.seed)?;
    for e in &edits {
        e.validate(&world.vocab, c.model.context_len)?;
    }
    let hash = c.gen_hash();
    write_resolved_config(ctx)?;
    write(&ctx.path(VOCAB), world.vocab.to_text())?;
    let doc: serde_json::Value = serde_json::from_str(&world.to_json()).expect("world JSON parses");
    write_stamped(&ctx.path(WORLD), &hash, WorldFile { world: doc })?;
    let header = [format!("config_hash: {hash}")];
    write(&ctx.path(EDITS), edits_to_jsonl(&edits, &world.vocab, &header))?;
    Ok(format!(
        "gen: {} entities, {} facts, {} chains, {} edits, vocabulary {}",
        world.entities.len(),
        world.facts.len(),
        world.chains.len(),
        edits.len(),
        world.vocab.len()
    ))
}

/// Trains the model to memorize the world and writes the checkpoint.
pub fn cmd_train(ctx: &Context) -> Result<String> {
    let c = &ctx.config;
    let world = load_world(ctx)?;
    let config = c.model_config(world.vocab.len());
    if world.max_sequence_len() > config.context_len {
        return Err(CliError::InvalidConfig(format!(
            "model.context_len {} is shorter than the longest training sequence ({})",
            config.context_len,
            world.max_sequence_len()
        )));
    }
    let mut model = ToyModel::init(config, c.seed)?;
    let log = train_memorize(&mut model, &world, &c.train_options(ctx.exec))?;
    let hash = c.train_hash();
    write_resolved_config(ctx)?;
    write(&ctx.path(MODEL), write_checkpoint(&model, hash_tag(&hash)))?;
    let mut text = serde_json::json!({ "config_hash": hash }).to_string();
    text.push('\n');
    text.push_str(&log.to_jsonl());
    write(&ctx.path(TRAIN_LOG), text)?;
    let verdict = match log.outcome {
        TrainOutcome::Converged => "converged",
        TrainOutcome::Underfit => "underfit",
    };
    Ok(format!(
        "train: {verdict} after {} steps, fact accuracy {:.4}",
        log.steps, log.final_accuracy
    ))
}

/// Scores layers on the proxy split with LGA, CMA, or both.
pub fn cmd_attr(ctx: &Context, method: Option<Method>) -> Result<String> {
    let methods = match method {
        Some(Method::BruteForce) => {
            return Err(CliError::InvalidConfig("attr supports lga and cma; use sweep for brute force".into()))
        }
        Some(m) => vec![m],
        None => vec![Method::Lga, Method::Cma],
    };
    let world = load_world(ctx)?;
    let edits = load_edits(ctx, &world)?;
    let model = load_model(ctx, &world)?;
    let (proxy, _) = split(ctx, &edits)?;
    let hash = ctx.config.attr_hash();
    let mut lines = Vec::new();
    for m in methods {
        let table = match m {
            Method::Lga => lga_scores(&model, &proxy, &ctx.config.lga_options(ctx.exec))?,
            _ => cma_scores(&model, &proxy, &ctx.config.cma_options(ctx.exec))?,
        };
        write_stamped(&ctx.path(scores_file(m)), &hash, &table)?;
        lines.push(format!("attr {}: layer {}", method_name(m), table.selected_layer));
    }
    write_resolved_config(ctx)?;
    Ok(lines.join("\n"))
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Lga => "lga",
        Method::Cma => "cma",
        Method::BruteForce => "bf",
    }
}

pub fn load_scores(ctx: &Context, method: Method) -> Result<LayerScoreTable> {
    let path = ctx.path(scores_file(method));
    let table: LayerScoreTable = read_stamped(&path, &ctx.config.attr_hash())?;
    if select_layer(&table.scores, &table.excluded) != Some(table.selected_layer) {
        return Err(golden_layer::Error::Validation(format!("{}: selected layer is not the masked argmax", path.display())).into());
    }
    Ok(table)
}

fn resolve_layer(ctx: &Context, choice: LayerChoice, n_layers: usize) -> Result<usize> {
    let layer = match choice {
        LayerChoice::Index(l) => l,
        LayerChoice::Lga => load_scores(ctx, Method::Lga)?.selected_layer,
        LayerChoice::Cma => load_scores(ctx, Method::Cma)?.selected_layer,
    };
    if layer >= n_layers {
        return Err(CliError::InvalidConfig(format!("layer {layer} out of range for {n_layers} layers")));
    }
    Ok(layer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub metrics: MetricVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub editor: EditorKind,
    pub layer: usize,
    pub checkpoint: String,
    pub samples: Vec<SampleMetrics>,
}

/// Edits the selected samples at one layer and writes a new checkpoint.
/// EMMET edits them as one batch; ROME and R-ROME apply them in order.
pub fn cmd_edit(ctx: &Context, choice: LayerChoice, sample_ids: &[String]) -> Result<String> {
    let world = load_world(ctx)?;
    let edits = load_edits(ctx, &world)?;
    let model = load_model(ctx, &world)?;
    let layer = resolve_layer(ctx, choice, model.n_layers())?;
    let chosen: Vec<EditQuery> = if sample_ids.is_empty() {
        edits.iter().take(1).cloned().collect()
    } else {
        sample_ids
            .iter()
            .map(|id| {
                edits
                    .iter()
                    .find(|e| &e.id == id)
                    .cloned()
                    .ok_or_else(|| CliError::InvalidConfig(format!("no edit with id `{id}`")))
            })
            .collect::<Result<_>>()?
    };
    if chosen.is_empty() {
        return Err(CliError::InvalidConfig("the edit set is empty".into()));
    }
    let spec = ctx.config.editor_spec(layer);
    let cov = covariances(ctx, &model, &world)?.swap_remove(layer);
    let edited = if spec.kind == EditorKind::Emmet {
        apply_edit(&model, &chosen, &spec, &cov)?.model
    } else {
        let mut m = model.clone();
        for e in &chosen {
            m = apply_edit(&m, std::slice::from_ref(e), &spec, &cov)?.model;
        }
        m
    };
    let samples = chosen
        .iter()
        .map(|e| {
            Ok(SampleMetrics {
                id: e.id.clone(),
                metrics: evaluate_edit(&model, &edited, e)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hash = ctx.config.edit_hash();
    let name = edited_checkpoint(spec.kind, layer);
    write(&ctx.path(&name), write_checkpoint(&edited, hash_tag(&hash)))?;
    let rewritten = samples.iter().filter(|s| s.metrics.rewrite == 1.0).count();
    let report = EditReport {
        editor: spec.kind,
        layer,
        checkpoint: name.clone(),
        samples,
    };
    write_stamped(&ctx.path(EDIT_METRICS), &hash, &report)?;
    write_resolved_config(ctx)?;
    Ok(format!(
        "edit: {} at layer {layer} ({choice}), {rewritten}/{} rewritten -> {name}",
        spec.kind,
        chosen.len()
    ))
}

/// Full layer × sample sweep with the configured editor, plus the proxy
/// protocol and deviation heatmap derived from the same grid.
pub fn cmd_sweep(ctx: &Context) -> Result<String> {
    let world = load_world(ctx)?;
    let edits = load_edits(ctx, &world)?;
    let model = load_model(ctx, &world)?;
    let (proxy, test) = split(ctx, &edits)?;
    let covs = covariances(ctx, &model, &world)?;
    let opts = ctx.config.sweep_options(ctx.exec);
    let sweep = layer_sweep(&model, &edits, &ctx.config.editor_spec(0), &covs, &opts)?;
    let ids = |v: &[EditQuery]| v.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
    let pr = proxy_generalization_from(&sweep.outcomes, &ids(&proxy), &ids(&test), opts.metric, &opts.weights)?;
    let heat = heatmap_csv(&[("all", &sweep.report), ("proxy", &pr.proxy), ("test", &pr.test)])?;

    let hash = ctx.config.edit_hash();
    write(&ctx.path(OUTCOMES), sweep.outcomes.to_csv())?;
    write_stamped(&ctx.path(SWEEP_REPORT), &hash, &sweep.report)?;
    write(&ctx.path(HEATMAP), heat)?;
    write_stamped(&ctx.path(PROXY_REPORT), &hash, &pr)?;
    write_resolved_config(ctx)?;
    let r = &sweep.report;
    let p = r.t_test.map_or("n/a".to_string(), |t| format!("{:.4}", t.p));
    Ok(format!(
        "sweep: golden layer {} ({:.4}) vs sample-wise optimal {:.4}, t-test p = {p}; proxy layer {} transfers with gap {:.4}",
        r.golden_layer, r.golden_score, r.sample_wise_optimal_score, pr.proxy_layer, pr.gap
    ))
}

pub fn load_sweep_report(ctx: &Context) -> Result<SweepReport> {
    read_stamped(&ctx.path(SWEEP_REPORT), &ctx.config.edit_hash())
}

pub fn load_proxy_report(ctx: &Context) -> Result<ProxyReport> {
    read_stamped(&ctx.path(PROXY_REPORT), &ctx.config.edit_hash())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lga: LayerScoreTable,
    pub cma: LayerScoreTable,
    pub rows: Vec<ComparisonRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// Spec for `kind` sharing the configured value search and covariance.
fn spec_for(ctx: &Context, kind: EditorKind, layer: usize) -> EditorSpec {
    let mut spec = ctx.config.editor_spec(layer);
    if spec.kind != kind {
        spec.kind = kind;
        spec.context_prefixes = EditorSpec::new(kind, layer).context_prefixes;
    }
    spec
}

/// LGA vs CMA: selects a layer with each on the proxy split, edits the test
/// split there with every editor and tabulates the metrics; then times both
/// selectors against a brute-force sweep of the proxy split.
pub fn cmd_compare(ctx: &Context) -> Result<String> {
    let world = load_world(ctx)?;
    let edits = load_edits(ctx, &world)?;
    let model = load_model(ctx, &world)?;
    let (proxy, test) = split(ctx, &edits)?;
    let covs = covariances(ctx, &model, &world)?;
    let opts = ctx.config.sweep_options(ctx.exec);
    let lga = lga_scores(&model, &proxy, &ctx.config.lga_options(ctx.exec))?;
    let cma = cma_scores(&model, &proxy, &ctx.config.cma_options(ctx.exec))?;

    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    for kind in EditorKind::ALL {
        let mut done: Vec<(usize, Vec<MetricVector>)> = Vec::new();
        for (method, layer) in [(Method::Lga, lga.selected_layer), (Method::Cma, cma.selected_layer)] {
            // both selectors often agree; evaluate each layer once
            if !done.iter().any(|(l, _)| *l == layer) {
                let spec = spec_for(ctx, kind, layer);
                let (metrics, diags) =
                    evaluate_at_layer(&model, &test, &spec, &covs[layer], ctx.config.eval.emmet_batch, &opts)?;
                diagnostics.extend(diags);
                done.push((layer, metrics));
            }
            let metrics = &done.iter().find(|(l, _)| *l == layer).expect("evaluated above").1;
            rows.push(ComparisonRow::new(kind, method, layer, metrics, &opts));
        }
    }
    let runtime: RuntimeRecord = runtime_benchmark(
        &model,
        &proxy,
        &ctx.config.editor_spec(0),
        &covs,
        &ctx.config.lga_options(ctx.exec),
        &ctx.config.cma_options(ctx.exec),
        &opts,
    )?;

    let hash = ctx.config.compare_hash();
    write(&ctx.path(COMPARISON_CSV), comparison_csv(&rows))?;
    let summary = rows
        .iter()
        .filter(|r| r.editor == ctx.config.editor.kind)
        .map(|r| format!("{} L{} OV {:.4}", method_name(r.selection), r.layer, r.metrics.overall))
        .collect::<Vec<_>>()
        .join(", ");
    write_stamped(
        &ctx.path(COMPARISON_JSON),
        &hash,
        Comparison {
            lga,
            cma,
            rows,
            diagnostics,
        },
    )?;
    write_stamped(&ctx.path(RUNTIME), &hash, &runtime)?;
    write_resolved_config(ctx)?;
    Ok(format!(
        "compare ({}): {summary}; BF/LGA {:.1}x, BF/CMA {:.1}x",
        ctx.config.editor.kind, runtime.bf_over_lga, runtime.bf_over_cma
    ))
}

pub fn load_comparison(ctx: &Context) -> Result<Comparison> {
    read_stamped(&ctx.path(COMPARISON_JSON), &ctx.config.compare_hash())
}

pub fn load_runtime(ctx: &Context) -> Result<RuntimeRecord> {
    read_stamped(&ctx.path(RUNTIME), &ctx.config.compare_hash())
}
