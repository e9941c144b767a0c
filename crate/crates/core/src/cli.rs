//! Command-line front end. Each subcommand reads files, runs one pipeline
//! stage and writes its outputs atomically into `--out`.
//!
//! Settings come from flags or from a `key=value` config file given with
//! `--config`; keys are the long flag names with `_` for `-`. Flags win.
//! Keys the running subcommand does not use are rejected.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::embedding::EmbeddingVector;
use crate::evaluation::{
    background_sweep, gallery_from_splits, queries_from_gallery, rank_table, split_profiles,
    EvaluationConfig, ProfileSplit, DEFAULT_RANK_POINTS,
};
use crate::features::{featurize, DEFAULT_SEQUENCE_LEN};
use crate::gallery::{export_embeddings, import_embeddings, Gallery};
use crate::ingestion::{
    group_by_user, load_profiles, parse_aalto, parse_canonical, write_canonical, write_profiles,
    AaltoColumns, IngestError, KeystrokeSequence, ProfileMeta,
};
use crate::model::{
    embed_all, load_weights, save_weights, train_with_progress, ModelConfig, Readout,
};
use crate::synth::{
    default_sentence_pool, generate_corpus, load_sentence_pool, rate_stats, sample_population,
    DEFAULT_SENTENCES_PER_USER,
};

pub const EVENTS_FILE: &str = "events.csv";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const RANKED_FILE: &str = "ranked.csv";
pub const RANK_TABLE_FILE: &str = "rank_table.csv";

#[derive(Parser, Debug)]
#[command(
    name = "keytrace",
    version,
    about = "Keystroke embeddings and 1:N profile re-identification"
)]
struct Cli {
    /// Plain-text `key=value` settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (required by synth, train and evaluate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic typist corpus.
    Synth(SynthArgs),
    /// Train the embedding network on a corpus.
    Train(TrainArgs),
    /// Split a corpus into verified/anonymous sets and embed every sequence.
    Enroll(EnrollArgs),
    /// Rank gallery profiles against one anonymous sample.
    Identify(IdentifyArgs),
    /// Background-size sweep with CMC curves and a rank table.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Default)]
struct CorpusArgs {
    /// Corpus directory holding events.csv (and optionally profiles.csv).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Events file; overrides the corpus directory's events.csv.
    #[arg(long)]
    events: Option<PathBuf>,
    /// `canonical` or `aalto`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    participant_col: Option<String>,
    #[arg(long)]
    section_col: Option<String>,
    #[arg(long)]
    keycode_col: Option<String>,
    #[arg(long)]
    press_col: Option<String>,
    #[arg(long)]
    release_col: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    /// 0 = identical typists, 1 = widely separated.
    #[arg(long)]
    separability: Option<f64>,
    #[arg(long)]
    sentences_per_user: Option<usize>,
    /// Comma-separated country codes assigned round-robin.
    #[arg(long)]
    countries: Option<String>,
    /// Sentence pool file, one sentence per line.
    #[arg(long)]
    sentence_pool: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Fixed sequence length.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    recurrent_dropout: Option<f64>,
    /// `last` or `mean`.
    #[arg(long)]
    readout: Option<String>,
}

#[derive(Args, Debug)]
struct EnrollArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Profile metadata CSV; defaults to the corpus directory's profiles.csv.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    verified: Option<usize>,
    #[arg(long)]
    anonymous: Option<usize>,
}

#[derive(Args, Debug)]
struct IdentifyArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Profile metadata CSV; defaults to profiles.csv beside the embeddings.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Use this gallery user's anonymous embeddings as the query.
    #[arg(long)]
    target: Option<String>,
    /// Embeddings CSV whose anonymous rows form the query.
    #[arg(long)]
    anonymous: Option<PathBuf>,
    /// Restrict the gallery, e.g. `country=FI`.
    #[arg(long)]
    prescreen: Option<String>,
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Comma-separated background sizes; defaults to the whole population.
    #[arg(long)]
    sizes: Option<String>,
    /// Comma-separated rank report points.
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    prescreen_attr: Option<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Enroll(_) => "enroll",
            Command::Identify(_) => "identify",
            Command::Evaluate(_) => "evaluate",
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn runtime(msg: impl Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

/// Values from the config file, overlaid by flags. Tracks which keys the
/// subcommand consumed so leftovers can be rejected.
struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("config line {}: expected key=value", n + 1)))?;
                file.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        Ok(Self {
            file,
            used: BTreeSet::new(),
        })
    }

    fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        self.used.insert(key.to_string());
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.get(key, flag)?.ok_or_else(|| {
            usage(format!(
                "missing required setting --{}",
                key.replace('_', "-")
            ))
        })
    }

    fn finish(&self) -> CliResult<()> {
        match self.file.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(usage(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let name = cli.command.name();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match cmd.find_subcommand_mut(name) {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!(
                "error: {msg}\n\n{usage}\n\nFor more information, try `keytrace {name} --help`."
            );
            2
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = cli.seed;
    let out_flag = cli.out;
    match cli.command {
        Command::Synth(a) => {
            let seed = s.required("seed", seed)?;
            let out = s.required("out", out_flag)?;
            cmd_synth(&mut s, a, seed, &out)
        }
        Command::Train(a) => {
            let seed = s.required("seed", seed)?;
            let out = s.required("out", out_flag)?;
            cmd_train(&mut s, a, seed, &out)
        }
        Command::Enroll(a) => {
            let seed = s.or("seed", seed, 0)?;
            let out = s.required("out", out_flag)?;
            cmd_enroll(&mut s, a, seed, &out)
        }
        Command::Identify(a) => {
            let out = s.required("out", out_flag)?;
            cmd_identify(&mut s, a, &out)
        }
        Command::Evaluate(a) => {
            let seed = s.required("seed", seed)?;
            let out = s.required("out", out_flag)?;
            cmd_evaluate(&mut s, a, seed, &out)
        }
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic<F>(path: &Path, fill: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> CliResult<()>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| runtime(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))
}

fn parse_list<T: FromStr>(key: &str, text: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| usage(format!("bad entry `{t}` in `{key}`")))
        })
        .collect()
}

fn cmd_synth(s: &mut Settings, a: SynthArgs, seed: u64, out: &Path) -> CliResult<()> {
    let users = s.required("users", a.users)?;
    let separability = s.or("separability", a.separability, 1.0)?;
    let per_user = s.or(
        "sentences_per_user",
        a.sentences_per_user,
        DEFAULT_SENTENCES_PER_USER,
    )?;
    let countries: Option<String> = s.get("countries", a.countries)?;
    let pool_path: Option<PathBuf> = s.get("sentence_pool", a.sentence_pool)?;
    s.finish()?;
    let countries: Vec<String> = countries
        .map(|c| parse_list("countries", &c))
        .transpose()?
        .unwrap_or_default();
    let country_refs: Vec<&str> = countries.iter().map(String::as_str).collect();
    let pool = match pool_path {
        Some(p) => load_sentence_pool(open(&p)?)?,
        None => default_sentence_pool(),
    };
    let population = sample_population(users, separability, &country_refs, seed).map_err(usage)?;
    let corpus = generate_corpus(&population, per_user, &pool, seed)?;
    create_out(out)?;
    write_atomic(&out.join(EVENTS_FILE), |w| {
        Ok(write_canonical(w, &corpus.sequences)?)
    })?;
    write_atomic(&out.join(PROFILES_FILE), |w| {
        Ok(write_profiles(w, &corpus.profiles)?)
    })?;
    let stats = rate_stats(&corpus.sequences);
    eprintln!(
        "synth: {} users, {} sequences, typing rate {:.2} +- {:.2} keys/s",
        population.len(),
        corpus.sequences.len(),
        stats.mean,
        stats.sd
    );
    Ok(())
}

struct CorpusSource {
    events: PathBuf,
    dir: Option<PathBuf>,
    aalto: Option<AaltoColumns>,
}

fn resolve_corpus(s: &mut Settings, a: CorpusArgs) -> CliResult<CorpusSource> {
    let dir: Option<PathBuf> = s.get("corpus", a.corpus)?;
    let events: Option<PathBuf> = s.get("events", a.events)?;
    let format = s.or("format", a.format, "canonical".to_string())?;
    let d = AaltoColumns::default();
    let columns = AaltoColumns {
        participant: s.or("participant_col", a.participant_col, d.participant)?,
        section: s.or("section_col", a.section_col, d.section)?,
        keycode: s.or("keycode_col", a.keycode_col, d.keycode)?,
        press: s.or("press_col", a.press_col, d.press)?,
        release: s.or("release_col", a.release_col, d.release)?,
    };
    let events = match (events, &dir) {
        (Some(e), _) => e,
        (None, Some(d)) => d.join(EVENTS_FILE),
        (None, None) => return Err(usage("one of --corpus or --events is required")),
    };
    let aalto = match format.as_str() {
        "canonical" => None,
        "aalto" => Some(columns),
        other => {
            return Err(usage(format!(
                "unknown format `{other}` (canonical or aalto)"
            )))
        }
    };
    Ok(CorpusSource { events, dir, aalto })
}

fn read_corpus(src: &CorpusSource) -> CliResult<Vec<KeystrokeSequence>> {
    let input = open(&src.events)?;
    let parsed = match &src.aalto {
        Some(columns) => parse_aalto(input, columns),
        None => parse_canonical(input),
    };
    parsed.map_err(|e| match e {
        IngestError::Rows(rows) => {
            let shown: Vec<String> = rows.iter().take(20).map(ToString::to_string).collect();
            runtime(format!(
                "{} bad row(s) in {}:\n  {}",
                rows.len(),
                src.events.display(),
                shown.join("\n  ")
            ))
        }
        other => runtime(format!("{}: {other}", src.events.display())),
    })
}

fn cmd_train(s: &mut Settings, a: TrainArgs, seed: u64, out: &Path) -> CliResult<()> {
    let src = resolve_corpus(s, a.corpus)?;
    let d = ModelConfig::default();
    let config = ModelConfig {
        hidden_units: s.or("units", a.units, d.hidden_units)?,
        num_layers: s.or("layers", a.layers, d.num_layers)?,
        sequence_len: s.or("m", a.m, DEFAULT_SEQUENCE_LEN)?,
        margin: s.or("margin", a.margin, d.margin)?,
        epochs: s.or("epochs", a.epochs, d.epochs)?,
        learning_rate: s.or("lr", a.lr, d.learning_rate)?,
        batch_size: s.or("batch_size", a.batch_size, d.batch_size)?,
        batches_per_epoch: s.or(
            "batches_per_epoch",
            a.batches_per_epoch,
            d.batches_per_epoch,
        )?,
        dropout_rate: s.or("dropout", a.dropout, d.dropout_rate)?,
        recurrent_dropout_rate: s.or(
            "recurrent_dropout",
            a.recurrent_dropout,
            d.recurrent_dropout_rate,
        )?,
        readout: s
            .get::<String>("readout", a.readout)?
            .map(|r| r.parse::<Readout>())
            .transpose()
            .map_err(usage)?
            .unwrap_or_default(),
        rng_seed: seed,
        ..d
    };
    s.finish()?;
    config.validate().map_err(usage)?;

    let grouped = group_by_user(read_corpus(&src)?);
    let mut users = Vec::new();
    for (user, seqs) in &grouped {
        if seqs.len() < 2 {
            eprintln!("train: skipping {user} ({} sequence)", seqs.len());
            continue;
        }
        users.push(
            seqs.iter()
                .map(|q| featurize(q, config.sequence_len))
                .collect::<Vec<_>>(),
        );
    }
    eprintln!(
        "train: {} users, {} epochs, {} units x {} layers",
        users.len(),
        config.epochs,
        config.hidden_units,
        config.num_layers
    );
    let report = train_with_progress(&config, &users, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.5}", epoch + 1)
    })?;
    create_out(out)?;
    save_weights(&out.join(WEIGHTS_FILE), &report.weights)?;
    write_atomic(&out.join(LOSS_FILE), |w| Ok(report.write_loss_csv(w)?))?;
    Ok(())
}

fn load_metas(path: &Path) -> CliResult<Vec<ProfileMeta>> {
    load_profiles(open(path)?).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn cmd_enroll(s: &mut Settings, a: EnrollArgs, seed: u64, out: &Path) -> CliResult<()> {
    let src = resolve_corpus(s, a.corpus)?;
    let weights_path: PathBuf = s.required("weights", a.weights)?;
    let profiles: Option<PathBuf> = s.get("profiles", a.profiles)?;
    let verified = s.or("verified", a.verified, 10)?;
    let anonymous = s.or("anonymous", a.anonymous, 5)?;
    s.finish()?;

    let weights = load_weights(&weights_path)
        .map_err(|e| runtime(format!("{}: {e}", weights_path.display())))?;
    let m = weights.config.sequence_len;
    let grouped = group_by_user(read_corpus(&src)?);
    let splits = split_profiles(&grouped, verified, anonymous, seed)?;
    let profiles = profiles.or_else(|| {
        src.dir
            .as_ref()
            .map(|d| d.join(PROFILES_FILE))
            .filter(|p| p.exists())
    });
    let metas = match profiles {
        Some(p) => load_metas(&p)?,
        None => Vec::new(),
    };
    let embed = |set: &[KeystrokeSequence]| -> CliResult<Vec<EmbeddingVector>> {
        let xs: Vec<_> = set.iter().map(|q| featurize(q, m)).collect();
        Ok(embed_all(&weights, &xs)?)
    };
    let embedded = splits
        .into_iter()
        .map(|sp| {
            Ok(ProfileSplit {
                verified: embed(&sp.verified)?,
                anonymous: embed(&sp.anonymous)?,
                user_id: sp.user_id,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let gallery = gallery_from_splits(embedded, &metas)?;
    create_out(out)?;
    write_atomic(&out.join(EMBEDDINGS_FILE), |w| {
        Ok(export_embeddings(&gallery, w)?)
    })?;
    let enrolled: Vec<ProfileMeta> = gallery.profiles().iter().map(|p| p.meta.clone()).collect();
    write_atomic(&out.join(PROFILES_FILE), |w| {
        Ok(write_profiles(w, &enrolled)?)
    })?;
    eprintln!(
        "enroll: {} profiles, {verified} verified + {anonymous} anonymous each",
        gallery.len()
    );
    Ok(())
}

/// Loads an embeddings CSV and attaches metadata from `profiles`, or from a
/// profiles.csv beside it when present.
fn load_gallery(embeddings: &Path, profiles: Option<PathBuf>) -> CliResult<Gallery> {
    let mut gallery = import_embeddings(open(embeddings)?)
        .map_err(|e| runtime(format!("{}: {e}", embeddings.display())))?;
    let sibling = embeddings
        .parent()
        .map(|d| d.join(PROFILES_FILE))
        .filter(|p| p.exists());
    if let Some(p) = profiles.or(sibling) {
        gallery.attach_meta(&load_metas(&p)?);
    }
    Ok(gallery)
}

fn cmd_identify(s: &mut Settings, a: IdentifyArgs, out: &Path) -> CliResult<()> {
    let embeddings: PathBuf = s.required("embeddings", a.embeddings)?;
    let profiles: Option<PathBuf> = s.get("profiles", a.profiles)?;
    let target: Option<String> = s.get("target", a.target)?;
    let anonymous: Option<PathBuf> = s.get("anonymous", a.anonymous)?;
    let prescreen: Option<String> = s.get("prescreen", a.prescreen)?;
    let top: Option<usize> = s.get("top", a.top)?;
    s.finish()?;
    let prescreen = prescreen
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage("--prescreen expects attribute=value"))
        })
        .transpose()?;

    let gallery = load_gallery(&embeddings, profiles)?;
    let query: Vec<EmbeddingVector> = match (&target, &anonymous) {
        (Some(t), None) => {
            let p = gallery
                .get(t)
                .ok_or_else(|| runtime(format!("query user `{t}` is not in the gallery")))?;
            if p.anonymous.is_empty() {
                return Err(runtime(format!("user `{t}` has no anonymous embeddings")));
            }
            p.anonymous.clone()
        }
        (None, Some(path)) => {
            let sample = import_embeddings(open(path)?)
                .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let q: Vec<EmbeddingVector> = sample
                .profiles()
                .iter()
                .flat_map(|p| p.anonymous.clone())
                .collect();
            if q.is_empty() {
                return Err(runtime(format!(
                    "{} holds no anonymous embeddings",
                    path.display()
                )));
            }
            q
        }
        _ => return Err(usage("exactly one of --target or --anonymous is required")),
    };

    // The gallery side uses verified embeddings only.
    let mut candidates = gallery.subset(|p| !p.verified.is_empty());
    if let Some((attr, value)) = &prescreen {
        candidates = candidates.prescreen(attr, value)?;
    }
    create_out(out)?;
    let path = out.join(RANKED_FILE);
    if candidates.is_empty() {
        eprintln!("warning: no profiles left after pre-screening; writing an empty list");
        write_atomic(&path, |w| Ok(writeln!(w, "rank,user_id,distance")?))?;
        return Ok(());
    }
    let mut ranked = candidates.rank(&query)?;
    ranked.query_user_id = target.clone();
    if let Some(n) = top {
        ranked.truncate(n);
    }
    write_atomic(&path, |w| Ok(ranked.write_csv(w)?))?;
    if let Some(best) = ranked.entries.first() {
        println!("{}", best.user_id);
    }
    if let Some(t) = &target {
        match ranked.rank_of(t) {
            Some(r) => eprintln!("identify: true match {t} at rank {r}"),
            None => eprintln!("identify: true match {t} not in the listed candidates"),
        }
    }
    Ok(())
}

fn cmd_evaluate(s: &mut Settings, a: EvaluateArgs, seed: u64, out: &Path) -> CliResult<()> {
    let embeddings: PathBuf = s.required("embeddings", a.embeddings)?;
    let profiles: Option<PathBuf> = s.get("profiles", a.profiles)?;
    let sizes: Option<String> = s.get("sizes", a.sizes)?;
    let ranks: Option<String> = s.get("ranks", a.ranks)?;
    let prescreen_attr: Option<String> = s.get("prescreen_attr", a.prescreen_attr)?;
    s.finish()?;

    let gallery = load_gallery(&embeddings, profiles)?;
    let sizes = match sizes {
        Some(t) => parse_list("sizes", &t)?,
        None => vec![gallery.len()],
    };
    let config = EvaluationConfig {
        background_sizes: sizes,
        prescreen_attribute: prescreen_attr,
        rng_seed: seed,
        rank_report_points: match ranks {
            Some(t) => parse_list("ranks", &t)?,
            None => DEFAULT_RANK_POINTS.to_vec(),
        },
        ..EvaluationConfig::default()
    };
    let queries = queries_from_gallery(&gallery);
    let sweep = background_sweep(&gallery, &config.background_sizes, seed)?;
    let results = sweep.evaluate(&gallery, &queries, config.prescreen_attribute.as_deref())?;
    let comment = format!(
        "{}\nqueries={} population={}",
        config.describe(),
        queries.len(),
        gallery.len()
    );

    create_out(out)?;
    for r in &results {
        for (curve, suffix) in
            std::iter::once((&r.raw, "")).chain(r.prescreened.iter().map(|c| (c, "_prescreened")))
        {
            let path = out.join(format!("cmc_N{}{suffix}.csv", r.size));
            write_atomic(&path, |w| Ok(curve.write_csv(w, &comment)?))?;
        }
    }
    let table = rank_table(&results, &config.rank_report_points);
    write_atomic(&out.join(RANK_TABLE_FILE), |w| {
        Ok(table.write_csv(w, &comment)?)
    })?;
    eprint!("{}", table.render());
    Ok(())
}
