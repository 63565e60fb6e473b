//! `ape` command-line front end.
//!
//! Exit codes: 0 success, 2 bad flags or argument values, 3 missing file,
//! 4 malformed input file, 5 numeric failure.
//!
//! CSV headers:
//! - profiles: `layer,position,mean,std`
//! - rotation: `degree,mode,divergence`
//! - lse-temperature: `layer,head,temperature,lse`
//! - compare: `position,parallel_vs_sequential,ape_vs_sequential`
//! - flops: `n_contexts,context_len,query_len,sequential,parallel,parallel_precached,ratio`

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::{flop_count, ApeConfig, AttentionMode, FlopDims, ScalingMode};
use crate::cache_sim::{self, Workload};
use crate::diagnostics::{self, AxisMode, StateKind};
use crate::error::ApeError;
use crate::kv_store::{self, ContextCacheEntry, KvSegment, PermutationCounting, Role};
use crate::model::{argmax, Model, ToyModelSpec};
use crate::rope::Layout;
use crate::tuner::{self, GoldLogLikelihood, SequentialAgreement, TuneMetric, TuneSpec};

pub const EXIT_BAD_FLAGS: u8 = 2;
pub const EXIT_MISSING_FILE: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn bad(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_BAD_FLAGS,
            message: msg.into(),
        }
    }
}

impl From<ApeError> for CliError {
    fn from(e: ApeError) -> Self {
        let code = match &e {
            ApeError::Io(io) if io.kind() == io::ErrorKind::NotFound => EXIT_MISSING_FILE,
            ApeError::NotFound(_) => EXIT_MISSING_FILE,
            e if e.is_format_error() => EXIT_FORMAT,
            ApeError::Numeric(_) | ApeError::Overflow(_) => EXIT_NUMERIC,
            ApeError::Io(_) => EXIT_MISSING_FILE,
            _ => EXIT_BAD_FLAGS,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ape", about = "Parallel-encoded KV caches with adaptive attention merging")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 0.02)]
    init_std: f32,
    #[arg(long, default_value_t = 10_000.0)]
    rope_base: f64,
    #[arg(long, default_value_t = 4096)]
    max_positions: usize,
    /// Seeds the model weights and every other random choice.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl ModelArgs {
    fn build(&self) -> CliResult<Model> {
        Ok(Model::new(ToyModelSpec {
            n_layers: self.layers,
            n_heads: self.heads,
            head_dim: self.head_dim,
            ffn_mult: self.ffn_mult,
            vocab: 256,
            seed: self.seed,
            init_std: self.init_std,
            rope_base: self.rope_base,
            max_positions: self.max_positions,
        })?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Parallel,
    Ape,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sequential => AttentionMode::Sequential,
            ModeArg::Parallel => AttentionMode::Parallel,
            ModeArg::Ape => AttentionMode::Ape,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LayoutArg {
    Sequential,
    Parallel,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Sequential => Layout::Sequential,
            LayoutArg::Parallel => Layout::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScalingArg {
    Aggregate,
    PerContext,
}

impl From<ScalingArg> for ScalingMode {
    fn from(s: ScalingArg) -> Self {
        match s {
            ScalingArg::Aggregate => ScalingMode::Aggregate,
            ScalingArg::PerContext => ScalingMode::PerContext,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct ApeArgs {
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, value_enum, default_value_t = ScalingArg::Aggregate)]
    scaling_mode: ScalingArg,
    /// Shared prefix text prepended once before all contexts.
    #[arg(long, default_value = "")]
    prefix: String,
}

impl ApeArgs {
    fn config(&self) -> CliResult<ApeConfig> {
        Ok(ApeConfig::new(self.temperature, self.scale, self.scaling_mode.into())?
            .with_prefix(self.prefix.as_bytes().to_vec()))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    KeySimilarity,
    InitialKey,
    InitialValue,
    KeyMagnitude,
    ValueMagnitude,
    QkProduct,
    Rotation,
    LseTemperature,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    GoldNll,
    Sequential,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode context files into `.apekv` caches.
    Encode {
        #[arg(long = "context", required = true, num_args = 1..)]
        contexts: Vec<PathBuf>,
        #[arg(long, default_value = "")]
        prefix: String,
        #[arg(long, value_enum, default_value_t = LayoutArg::Parallel)]
        layout: LayoutArg,
        /// Output directory; files are named `<id-hex>.apekv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Greedy generation from cached contexts.
    Generate {
        #[arg(long = "cache", required = true, num_args = 1..)]
        caches: Vec<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Ape)]
        mode: ModeArg,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        #[command(flatten)]
        ape: ApeArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-position logit divergence of parallel and APE against sequential encoding.
    Compare {
        #[arg(long = "context", required = true, num_args = 1..)]
        contexts: Vec<PathBuf>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        ape: ApeArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// KV-state diagnostics written as CSV.
    Diag {
        #[arg(value_enum)]
        profile: Profile,
        /// Text file with one sample (or context, for rotation) per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to one layer; all layers otherwise.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Query text for the rotation experiment.
        #[arg(long, default_value = "Q:")]
        query: String,
        #[arg(long, value_delimiter = ',', default_value = "0,45,90,135,180,225,270,315,360")]
        degrees: Vec<f64>,
        #[arg(long, value_enum, default_value_t = LayoutArg::Parallel)]
        layout: LayoutArg,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        temperatures: Vec<f64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Greedy search over prefix length, temperature and scale.
    Tune {
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::GoldNll)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = ScalingArg::Aggregate)]
        scaling_mode: ScalingArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Prefix-cache vs APE-cache hit rates for subset retrieval.
    Simcache {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        budget: u64,
        /// Shuffle retrieval order within each query using this seed.
        #[arg(long)]
        shuffle_seed: Option<u64>,
    },
    /// Analytic attention MAC counts per context count.
    Flops {
        #[arg(long, default_value_t = 512)]
        context_len: u64,
        #[arg(long, default_value_t = 8)]
        max_contexts: u64,
        #[arg(long, default_value_t = 64)]
        query_len: u64,
        #[arg(long, default_value_t = 0)]
        prefix_len: u64,
        #[arg(long, default_value_t = 32)]
        layers: u64,
        #[arg(long, default_value_t = 32)]
        heads: u64,
        #[arg(long, default_value_t = 128)]
        head_dim: u64,
    },
    /// Memory needed to cache every order-dependent KV state of a chunk set.
    Permcache {
        #[arg(long, default_value_t = 10)]
        chunks: u64,
        #[arg(long, default_value_t = 256)]
        tokens_per_chunk: u64,
        #[arg(long, default_value_t = 32)]
        layers: u64,
        #[arg(long, default_value_t = 8)]
        kv_heads: u64,
        #[arg(long, default_value_t = 128)]
        head_dim: u64,
        #[arg(long, default_value_t = 2)]
        bytes_per_elem: u64,
    },
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::from(ApeError::Io(e)).with_path(path))
}

impl CliError {
    fn with_path(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::from(ApeError::Io(e)).with_path(p)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::from(ApeError::Io(e))),
    }
}

fn json<T: Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::from(ApeError::from(e)))
}

fn encode_prefix(model: &Model, prefix: &str) -> CliResult<KvSegment> {
    Ok(model.encode_segment(prefix.as_bytes(), Role::Prefix, None, 0)?)
}

#[derive(Serialize)]
struct EncodedFile {
    file: String,
    id: String,
    position_offset: usize,
    token_len: usize,
}

fn cmd_encode(
    contexts: &[PathBuf],
    prefix: &str,
    layout: Layout,
    out: &Path,
    model: &Model,
) -> CliResult<String> {
    let texts = contexts
        .iter()
        .map(|p| read_bytes(p))
        .collect::<CliResult<Vec<_>>>()?;
    let prefix_kv = encode_prefix(model, prefix)?;
    let segments = match layout {
        Layout::Parallel => texts
            .iter()
            .map(|t| model.encode_segment(t, Role::Context, Some(&prefix_kv), prefix_kv.seq_len))
            .collect::<Result<Vec<_>, _>>()?,
        Layout::Sequential => tuner::encode_sequential(model, &prefix_kv, &texts)?,
    };
    fs::create_dir_all(out).map_err(|e| CliError::from(ApeError::Io(e)).with_path(out))?;
    let mut written = Vec::new();
    for (t, seg) in texts.iter().zip(segments) {
        let entry = ContextCacheEntry::new(t, model.checksum(), seg)?;
        let path = out.join(entry.file_name());
        kv_store::persist(&entry, &path)?;
        written.push(EncodedFile {
            file: path.display().to_string(),
            id: format!("{:016x}", entry.id),
            position_offset: entry.segment.position_offset,
            token_len: entry.token_len,
        });
    }
    json(&written)
}

#[derive(Serialize)]
struct TraceStep {
    step: usize,
    token: u8,
    logit: f32,
}

#[derive(Serialize)]
struct GenerateReport {
    mode: AttentionMode,
    config: ApeConfig,
    generated: String,
    tokens: Vec<u8>,
    trace: Vec<TraceStep>,
}

fn cmd_generate(
    caches: &[PathBuf],
    query: &str,
    mode: AttentionMode,
    max_new: usize,
    cfg: &ApeConfig,
    model: &Model,
) -> CliResult<String> {
    let mut contexts = Vec::with_capacity(caches.len());
    for p in caches {
        let entry = kv_store::load(p).map_err(|e| CliError::from(e).with_path(p))?;
        if entry.model_checksum != model.checksum() {
            return Err(CliError {
                code: EXIT_FORMAT,
                message: format!(
                    "{}: cache was built by model {:016x}, current model is {:016x}",
                    p.display(),
                    entry.model_checksum,
                    model.checksum()
                ),
            });
        }
        contexts.push(entry.segment);
    }
    let prefix_kv = model.encode_segment(&cfg.prefix_tokens, Role::Prefix, None, 0)?;
    let out = model.decode_with_cache(query.as_bytes(), Some(&prefix_kv), &contexts, mode, cfg, max_new)?;
    let trace = out
        .generated
        .iter()
        .zip(out.decision_logits())
        .enumerate()
        .map(|(step, (token, logits))| TraceStep {
            step,
            token: *token,
            logit: logits[argmax(logits)],
        })
        .collect();
    json(&GenerateReport {
        mode,
        config: cfg.clone(),
        generated: String::from_utf8_lossy(&out.generated).into_owned(),
        tokens: out.generated,
        trace,
    })
}

/// Per-position logit L2 divergence of parallel and APE runs against sequential encoding.
pub fn compare_rows(
    model: &Model,
    contexts: &[Vec<u8>],
    query: &[u8],
    cfg: &ApeConfig,
) -> crate::Result<Vec<(usize, f64, f64)>> {
    let prefix_kv = model.encode_segment(&cfg.prefix_tokens, Role::Prefix, None, 0)?;
    let sequential = tuner::encode_sequential(model, &prefix_kv, contexts)?;
    let parallel = contexts
        .iter()
        .map(|c| model.encode_segment(c, Role::Context, Some(&prefix_kv), prefix_kv.seq_len))
        .collect::<crate::Result<Vec<_>>>()?;
    let plain = ApeConfig::default();
    let run = |caches: &[KvSegment], mode, cfg: &ApeConfig| {
        model
            .decode_with_cache(query, Some(&prefix_kv), caches, mode, cfg, 0)
            .map(|o| o.prefill_logits)
    };
    let seq = run(&sequential, AttentionMode::Sequential, &plain)?;
    let par = run(&parallel, AttentionMode::Parallel, &plain)?;
    let ape = run(&parallel, AttentionMode::Ape, cfg)?;
    Ok((0..seq.len())
        .map(|i| {
            (
                i,
                tuner::l2_distance(&par[i], &seq[i]),
                tuner::l2_distance(&ape[i], &seq[i]),
            )
        })
        .collect())
}

fn cmd_compare(contexts: &[PathBuf], query: &str, cfg: &ApeConfig, model: &Model) -> CliResult<String> {
    let texts = contexts
        .iter()
        .map(|p| read_bytes(p))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = compare_rows(model, &texts, query.as_bytes(), cfg)?;
    let mut csv = String::from("position,parallel_vs_sequential,ape_vs_sequential\n");
    for (p, par, ape) in rows {
        let _ = writeln!(csv, "{p},{par},{ape}");
    }
    Ok(csv)
}

fn read_corpus(path: &Path) -> CliResult<Vec<Vec<u8>>> {
    let text = read_bytes(path)?;
    let lines: Vec<Vec<u8>> = text
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(<[u8]>::to_vec)
        .collect();
    if lines.is_empty() {
        return Err(CliError {
            code: EXIT_FORMAT,
            message: format!("{}: corpus has no samples", path.display()),
        });
    }
    Ok(lines)
}

#[allow(clippy::too_many_arguments)]
fn cmd_diag(
    profile: Profile,
    corpus: &Path,
    layer: Option<usize>,
    query: &str,
    degrees: &[f64],
    layout: Layout,
    temperatures: &[f64],
    model: &Model,
    seed: u64,
) -> CliResult<String> {
    let samples = read_corpus(corpus)?;
    let n_layers = model.spec().n_layers;
    let layers: Vec<usize> = match layer {
        Some(l) if l >= n_layers => {
            return Err(CliError::bad(format!("--layer {l} out of range (model has {n_layers})")))
        }
        Some(l) => vec![l],
        None => (0..n_layers).collect(),
    };
    let mut csv = String::new();
    match profile {
        Profile::Rotation => {
            csv.push_str("degree,mode,divergence\n");
            for axis in [AxisMode::Shared, AxisMode::PerContext] {
                let rows = diagnostics::rotation_experiment(
                    model,
                    &samples,
                    query.as_bytes(),
                    degrees,
                    axis,
                    layout,
                    seed,
                )?;
                for r in rows {
                    let _ = writeln!(csv, "{},{},{}", r.degree, axis.label(), r.divergence);
                }
            }
        }
        Profile::LseTemperature => {
            csv.push_str("layer,head,temperature,lse\n");
            let hd = model.spec().head_dim;
            let traces = model.layer_states(&samples[0])?;
            for &l in &layers {
                let t = &traces[l];
                let last = t.q.rows() - 1;
                for h in 0..model.spec().n_heads {
                    let q = t.q.col_block(h * hd, hd)?;
                    let q = crate::tensor::Mat::new(1, hd, q.row(last).to_vec())?;
                    let k = t.k.col_block(h * hd, hd)?;
                    let curve = diagnostics::lse_vs_temperature(&q, &k, temperatures)?;
                    for (temp, row) in temperatures.iter().zip(curve) {
                        let _ = writeln!(csv, "{l},{h},{temp},{}", row[0]);
                    }
                }
            }
        }
        _ => {
            csv.push_str("layer,position,mean,std\n");
            for &l in &layers {
                let report = match profile {
                    Profile::KeySimilarity => diagnostics::key_similarity_profile(model, &samples, l)?,
                    Profile::InitialKey => {
                        diagnostics::initial_vs_rest_similarity(model, &samples, l, StateKind::Key)?
                    }
                    Profile::InitialValue => {
                        diagnostics::initial_vs_rest_similarity(model, &samples, l, StateKind::Value)?
                    }
                    Profile::KeyMagnitude => {
                        diagnostics::magnitude_profile(model, &samples, l, StateKind::Key)?
                    }
                    Profile::ValueMagnitude => {
                        diagnostics::magnitude_profile(model, &samples, l, StateKind::Value)?
                    }
                    Profile::QkProduct => {
                        let n = samples.iter().map(Vec::len).min().unwrap_or(0);
                        let per_sample = samples
                            .iter()
                            .map(|s| diagnostics::qk_product_profile(model, &s[..n], l))
                            .collect::<Result<Vec<_>, _>>()?;
                        let columns: Vec<Vec<f64>> = (0..n)
                            .map(|p| per_sample.iter().map(|v| v[p]).collect())
                            .collect();
                        diagnostics::ProfileReport::from_columns(l, &columns)
                    }
                    Profile::Rotation | Profile::LseTemperature => unreachable!(),
                };
                for row in report.csv_rows() {
                    csv.push_str(&row);
                    csv.push('\n');
                }
            }
        }
    }
    Ok(csv)
}

fn cmd_tune(validation: &Path, metric: MetricArg, scaling: ScalingMode, model: &Model) -> CliResult<String> {
    let examples = tuner::load_validation(validation).map_err(|e| CliError::from(e).with_path(validation))?;
    let metric: &dyn TuneMetric = match metric {
        MetricArg::GoldNll => &GoldLogLikelihood,
        MetricArg::Sequential => &SequentialAgreement,
    };
    let mut spec = TuneSpec::new(examples, metric);
    spec.scaling_mode = scaling;
    json(&tuner::greedy_tune(model, &spec)?)
}

fn cmd_simcache(n: usize, k: usize, budget: u64, shuffle_seed: Option<u64>) -> CliResult<String> {
    let mut w = Workload::all_subsets(n, k, budget)?;
    if let Some(seed) = shuffle_seed {
        w = w.shuffled(seed);
    }
    json(&cache_sim::report(&w)?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_flops(
    context_len: u64,
    max_contexts: u64,
    query_len: u64,
    prefix_len: u64,
    dims: FlopDims,
) -> CliResult<String> {
    let mut csv = String::from(
        "n_contexts,context_len,query_len,sequential,parallel,parallel_precached,ratio\n",
    );
    for n in 1..=max_contexts {
        let lens = vec![context_len; n as usize];
        let seq = flop_count(AttentionMode::Sequential, false, prefix_len, &lens, query_len, dims).total();
        let par = flop_count(AttentionMode::Parallel, false, prefix_len, &lens, query_len, dims).total();
        let pre = flop_count(AttentionMode::Parallel, true, prefix_len, &lens, query_len, dims).total();
        let ratio = if pre == 0 { 0.0 } else { seq as f64 / pre as f64 };
        let _ = writeln!(csv, "{n},{context_len},{query_len},{seq},{par},{pre},{ratio}");
    }
    Ok(csv)
}

/// Reference figure quoted for caching all orderings of ten 256-token chunks.
pub const REFERENCE_PERMUTATION_BYTES: f64 = 22e15;

#[derive(Serialize)]
struct PermReport {
    chunks: u64,
    tokens_per_chunk: u64,
    bytes_per_token: String,
    ordered_predecessors_bytes: String,
    full_sequences_bytes: String,
    reference_bytes: f64,
    ordered_predecessors_ratio_to_reference: f64,
    full_sequences_ratio_to_reference: f64,
}

fn cmd_permcache(
    chunks: u64,
    tokens: u64,
    layers: u64,
    kv_heads: u64,
    head_dim: u64,
    bytes: u64,
) -> CliResult<String> {
    let ordered = kv_store::estimate_permutation_cache(
        chunks,
        tokens,
        layers,
        kv_heads,
        head_dim,
        bytes,
        PermutationCounting::OrderedPredecessors,
    )?;
    let full = kv_store::estimate_permutation_cache(
        chunks,
        tokens,
        layers,
        kv_heads,
        head_dim,
        bytes,
        PermutationCounting::FullSequences,
    )?;
    json(&PermReport {
        chunks,
        tokens_per_chunk: tokens,
        bytes_per_token: kv_store::kv_bytes_per_token(layers, kv_heads, head_dim, bytes).to_string(),
        ordered_predecessors_bytes: ordered.to_string(),
        full_sequences_bytes: full.to_string(),
        reference_bytes: REFERENCE_PERMUTATION_BYTES,
        ordered_predecessors_ratio_to_reference: ordered as f64 / REFERENCE_PERMUTATION_BYTES,
        full_sequences_ratio_to_reference: full as f64 / REFERENCE_PERMUTATION_BYTES,
    })
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Encode {
            contexts,
            prefix,
            layout,
            out,
            model,
        } => {
            let m = model.build()?;
            emit(None, &cmd_encode(&contexts, &prefix, layout.into(), &out, &m)?)
        }
        Command::Generate {
            caches,
            query,
            mode,
            max_new,
            ape,
            model,
        } => {
            let m = model.build()?;
            emit(None, &cmd_generate(&caches, &query, mode.into(), max_new, &ape.config()?, &m)?)
        }
        Command::Compare {
            contexts,
            query,
            out,
            ape,
            model,
        } => {
            let m = model.build()?;
            emit(out.as_deref(), &cmd_compare(&contexts, &query, &ape.config()?, &m)?)
        }
        Command::Diag {
            profile,
            corpus,
            layer,
            out,
            query,
            degrees,
            layout,
            temperatures,
            model,
        } => {
            let m = model.build()?;
            let csv = cmd_diag(
                profile,
                &corpus,
                layer,
                &query,
                &degrees,
                layout.into(),
                &temperatures,
                &m,
                model.seed,
            )?;
            emit(out.as_deref(), &csv)
        }
        Command::Tune {
            validation,
            metric,
            scaling_mode,
            model,
        } => {
            let m = model.build()?;
            emit(None, &cmd_tune(&validation, metric, scaling_mode.into(), &m)?)
        }
        Command::Simcache {
            n,
            k,
            budget,
            shuffle_seed,
        } => emit(None, &cmd_simcache(n, k, budget, shuffle_seed)?),
        Command::Flops {
            context_len,
            max_contexts,
            query_len,
            prefix_len,
            layers,
            heads,
            head_dim,
        } => emit(
            None,
            &cmd_flops(
                context_len,
                max_contexts,
                query_len,
                prefix_len,
                FlopDims {
                    n_layers: layers,
                    n_heads: heads,
                    head_dim,
                },
            )?,
        ),
        Command::Permcache {
            chunks,
            tokens_per_chunk,
            layers,
            kv_heads,
            head_dim,
            bytes_per_elem,
        } => emit(
            None,
            &cmd_permcache(chunks, tokens_per_chunk, layers, kv_heads, head_dim, bytes_per_elem)?,
        ),
    }
}

/// Parses arguments, runs the subcommand, and maps failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_BAD_FLAGS)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
