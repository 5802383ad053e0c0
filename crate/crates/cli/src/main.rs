use std::collections::HashMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use protospoof::config::RunConfig;
use protospoof::manifest::{Manifest, MissingAudio};
use protospoof::net::EmbeddingNet;
use protospoof::pipeline::{build_augmented_manifest, features_for, train_run, AugmentPolicy};
use protospoof::scoring::{
    align, asv_errors_from_file, build_prototype_bank, eer, export_embeddings, min_tdcf, read_scores, score_set, split_by_label,
    train_fusion, write_scores, FusionOptions, PrototypeBank, TdcfParams,
};
use protospoof::synth::{gen_synth, separability, SynthSpec};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "protospoof", version, about = "Prototypical-network spoofing countermeasure")]
struct Cli {
    /// Worker threads for feature extraction and augmentation (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Print the effective run configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,

    /// Run configuration used with --print-config.
    #[arg(long, requires = "print_config")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bonafide/spoof corpus with a manifest.
    GenSynth(GenSynthArgs),
    /// Write augmented copies of every utterance and a grown manifest.
    Augment(AugmentArgs),
    /// Compute features into the cache.
    ExtractFeatures(ExtractArgs),
    /// Train the embedding network, keeping the best dev checkpoint.
    Train(TrainArgs),
    /// Average training embeddings into a two-prototype bank.
    BuildBank(BuildBankArgs),
    /// Score utterances against a prototype bank.
    Score(ScoreArgs),
    /// EER and min-tDCF of a score file.
    Evaluate(EvaluateArgs),
    /// Logistic-regression fusion of several score files.
    Fuse(FuseArgs),
    /// Dump one embedding per utterance as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_bonafide: usize,
    #[arg(long, default_value_t = 100)]
    n_spoof: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "SYN")]
    prefix: String,
    #[arg(long, default_value_t = 1.0)]
    min_duration: f64,
    #[arg(long, default_value_t = 1.5)]
    max_duration: f64,
    /// Comma-separated spoof profile ids (default: every built-in profile).
    #[arg(long, value_delimiter = ',')]
    profiles: Vec<String>,
    /// Also report how separable the classes are to a linear probe.
    #[arg(long)]
    self_test: bool,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated kinds among codec, alaw, wideband, pitch, reverb, or `none`.
    #[arg(long, default_value = "codec,pitch,reverb")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the configured cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    dev_manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// CM score file, `utt<TAB>score` per line.
    #[arg(long)]
    cm: PathBuf,
    /// Manifest giving the label of every scored utterance.
    #[arg(long)]
    keys: PathBuf,
    /// ASV score file, `utt key score` with key in target/nontarget/spoof.
    #[arg(long)]
    asv: Option<PathBuf>,
    /// TOML file of t-DCF priors and costs.
    #[arg(long)]
    tdcf_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Dev score files, one per system.
    #[arg(long, num_args = 1.., required = true)]
    dev: Vec<PathBuf>,
    #[arg(long)]
    dev_keys: PathBuf,
    /// Score files to fuse, in the same system order as --dev.
    #[arg(long, num_args = 1.., required = true)]
    apply: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    weights_out: Option<PathBuf>,
    /// Effective bonafide prior, or `none` for unweighted trials.
    #[arg(long, default_value = "0.5")]
    prior: String,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout().lock(), $($arg)*)?
    };
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Ok(Manifest::load(path, MissingAudio::Error)?)
}

/// Short content hash identifying a checkpoint file.
fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn label_map(manifest: &Manifest) -> HashMap<String, usize> {
    manifest.records.iter().map(|r| (r.utt.clone(), r.label.index())).collect()
}

fn gen_synth_cmd(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_bonafide: a.n_bonafide,
        n_spoof: a.n_spoof,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        seed: a.seed,
        prefix: a.prefix,
        profiles: a.profiles,
        ..SynthSpec::default()
    };
    let m = gen_synth(&spec, &a.out_dir)?;
    out!("wrote {} utterances to {}", m.len(), a.out_dir.join("manifest.tsv").display());
    if a.self_test {
        let acc = separability(&m)?;
        out!("linear probe accuracy {acc:.4}");
        if acc < 0.9 {
            bail!("classes are not separable enough ({acc:.4} < 0.9)");
        }
    }
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let policy: AugmentPolicy = a.policy.parse()?;
    let m = load_manifest(&a.manifest)?;
    let out = build_augmented_manifest(&m, &policy, &a.out_dir, a.seed)?;
    out!("{} -> {} utterances ({}x)", m.len(), out.len(), policy.growth());
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(dir) = a.cache_dir {
        cfg.paths.cache_dir = Some(dir);
    }
    let Some(dir) = cfg.paths.cache_dir.clone() else {
        bail!("no cache directory: pass --cache-dir or set paths.cache_dir");
    };
    let m = load_manifest(&a.manifest)?;
    let f = features_for(&cfg, &m)?;
    out!("{} utterances, {} x {} features cached in {}", f.len(), f.frames, f.dims, dir.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (tm, dm) = (load_manifest(&a.train_manifest)?, load_manifest(&a.dev_manifest)?);
    let (train, dev) = (features_for(&cfg, &tm)?, features_for(&cfg, &dm)?);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml())?;
    let out = train_run(&cfg, &train, &dev, Some(&a.out_dir))?;
    match out.best_dev_accuracy {
        Some(acc) => out!("best epoch {} dev accuracy {acc:.4}", out.best_epoch),
        None => out!("no epochs run"),
    }
    out!("checkpoint {}", a.out_dir.join("best.ckpt").display());
    Ok(())
}

fn build_bank_cmd(a: BuildBankArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (net, _) = EmbeddingNet::load(&a.checkpoint)?;
    let train = features_for(&cfg, &load_manifest(&a.train_manifest)?)?;
    let bank = build_prototype_bank(&net, &train, &checkpoint_id(&a.checkpoint)?)?;
    bank.save(&a.out)?;
    out!("bank from {} utterances -> {}", train.len(), a.out.display());
    Ok(())
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (net, _) = EmbeddingNet::load(&a.checkpoint)?;
    let bank = PrototypeBank::load(&a.bank)?;
    let id = checkpoint_id(&a.checkpoint)?;
    if bank.checkpoint_id != id {
        bail!("bank {} was built from checkpoint {} but {} is {id}", a.bank.display(), bank.checkpoint_id, a.checkpoint.display());
    }
    let data = features_for(&cfg, &load_manifest(&a.manifest)?)?;
    let scores = score_set(&net, &bank, &data, cfg.scoring.distance)?;
    write_scores(&a.out, &scores)?;
    out!("scored {} utterances -> {}", scores.len(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let scores = read_scores(&a.cm)?;
    let keys = Manifest::load(&a.keys, MissingAudio::Ignore)?;
    let (bona, spoof) = split_by_label(&scores, &label_map(&keys))?;
    let e = eer(&bona, &spoof)?;
    out!("EER {:?}", e.eer);
    out!("threshold {:?}", e.threshold);
    if let Some(asv) = a.asv {
        let params: TdcfParams = match a.tdcf_config {
            Some(p) => toml::from_str(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TdcfParams::default(),
        };
        let rates = asv_errors_from_file(&asv)?;
        let t = min_tdcf(&bona, &spoof, &rates, &params)?;
        out!("min-tDCF {:?}", t.min_tdcf);
    } else if a.tdcf_config.is_some() {
        bail!("--tdcf-config needs --asv scores");
    }
    Ok(())
}

fn fuse_cmd(a: FuseArgs) -> Result<()> {
    if a.dev.len() != a.apply.len() {
        bail!("{} dev score files but {} to apply", a.dev.len(), a.apply.len());
    }
    let prior = match a.prior.as_str() {
        "none" => None,
        p => Some(p.parse::<f64>().with_context(|| format!("bad prior `{p}`"))?),
    };
    let read_all = |paths: &[PathBuf]| paths.iter().map(read_scores).collect::<protospoof::Result<Vec<_>>>();
    let (ids, dev_cols) = align(&read_all(&a.dev)?)?;
    let keys = label_map(&Manifest::load(&a.dev_keys, MissingAudio::Ignore)?);
    let labels = ids
        .iter()
        .map(|u| keys.get(u).copied().with_context(|| format!("no key for dev utterance `{u}`")))
        .collect::<Result<Vec<_>>>()?;
    let opts = FusionOptions { prior, l2: a.l2, ..FusionOptions::default() };
    let fusion = train_fusion(&dev_cols, &labels, &opts)?;
    let (apply_ids, cols) = align(&read_all(&a.apply)?)?;
    let fused = fusion.apply(&cols)?;
    write_scores(&a.out, &apply_ids.into_iter().zip(fused).collect::<Vec<_>>())?;
    if let Some(p) = a.weights_out {
        fs::write(&p, serde_json::to_string_pretty(&fusion)?)?;
    }
    out!("weights {:?} offset {:?}", fusion.weights, fusion.offset);
    Ok(())
}

fn export_cmd(a: ExportArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (net, _) = EmbeddingNet::load(&a.checkpoint)?;
    let data = features_for(&cfg, &load_manifest(&a.manifest)?)?;
    let n = export_embeddings(&net, &data, &a.out)?;
    out!("{n} embeddings -> {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    if cli.print_config {
        std::io::stdout().lock().write_all(load_config(cli.config.as_deref())?.to_toml().as_bytes())?;
        return Ok(());
    }
    match cli.command {
        Some(Command::GenSynth(a)) => gen_synth_cmd(a),
        Some(Command::Augment(a)) => augment_cmd(a),
        Some(Command::ExtractFeatures(a)) => extract_cmd(a),
        Some(Command::Train(a)) => train_cmd(a),
        Some(Command::BuildBank(a)) => build_bank_cmd(a),
        Some(Command::Score(a)) => score_cmd(a),
        Some(Command::Evaluate(a)) => evaluate_cmd(a),
        Some(Command::Fuse(a)) => fuse_cmd(a),
        Some(Command::ExportEmbeddings(a)) => export_cmd(a),
        None => Cli::command().error(clap::error::ErrorKind::MissingSubcommand, "a subcommand is required").exit(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors often repeat their cause in their own message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
