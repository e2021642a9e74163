use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathpatch::augment::{apply_train, AugRng, AugmentConfig};
use pathpatch::compile::{compile, plan_split, CompileOptions};
use pathpatch::config::CompileConfig;
use pathpatch::manifest::{manifest_stats, verify, Manifest, VerifyOptions};
use pathpatch::protocol::{preset_names, protocol};
use pathpatch::raster::Raster;
use pathpatch::sampler::tiny_subset;
use pathpatch::split::{fraction_subset, save_split_csv, write_split_csv, Split};
use pathpatch::stats::StatsMode;
use pathpatch::synth::{write_synthetic_corpus, SynthSpec};
use pathpatch::{Error, Exec};

const EXIT_FINDINGS: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

/// Compiles whole-slide image corpora into fixed-scale patch datasets.
#[derive(Parser)]
#[command(name = "pathpatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a dataset from a JSON config.
    Compile(CompileArgs),
    /// Print or save the slide-level split of a corpus.
    Split(SplitArgs),
    /// Per-channel mean and standard deviation of a compiled split.
    Stats(StatsArgs),
    /// Check a compiled dataset against its manifest.
    Verify(VerifyArgs),
    /// Write augmented previews of training patches.
    Augment(AugmentArgs),
    /// Print a training-protocol preset.
    Protocol(ProtocolArgs),
    /// Write a subset manifest of whole slides.
    Subset(SubsetArgs),
    /// Generate a synthetic slide corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count (0 = all cores, 1 = sequential).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    emit_tissue_masks: bool,
    /// Replace an existing dataset directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split to measure; every record when omitted.
    #[arg(long)]
    split: Option<Split>,
    /// One sample per image (its channel means) instead of one per pixel.
    #[arg(long)]
    per_image_mean: bool,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Recompute content hashes.
    #[arg(long)]
    hash: bool,
}

#[derive(Args)]
struct AugmentArgs {
    /// Required; previews are the only offline augmentation output.
    #[arg(long)]
    preview: bool,
    /// Augmentation config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long, required_unless_present = "list")]
    preset: Option<String>,
    /// Intervals in the learning-rate table.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct SubsetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest file.
    #[arg(long)]
    out: PathBuf,
    /// Keep this fraction of slides, rounded up.
    #[arg(long, conflicts_with = "tiny", required_unless_present = "tiny")]
    fraction: Option<f64>,
    /// Balanced subset: slides per organ, patches per slide.
    #[arg(long)]
    tiny: bool,
    #[arg(long, value_delimiter = ',', requires = "tiny")]
    organs: Vec<String>,
    #[arg(long, default_value_t = 1)]
    slides_per_organ: usize,
    #[arg(long, default_value_t = 1)]
    patches_per_slide: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    slides: usize,
    #[arg(long, default_value_t = 1024)]
    size_px: u32,
    #[arg(long, default_value_t = 1.0)]
    base_mpp: f64,
    #[arg(long)]
    tumor_annotations: bool,
    #[arg(long)]
    segmentation_masks: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Findings(String),
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn run_compile(a: CompileArgs) -> CmdResult {
    let mut cfg = CompileConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = a.jobs {
        cfg.jobs = jobs;
    }
    cfg.emit_tissue_masks |= a.emit_tissue_masks;
    let opts = CompileOptions {
        out: a.out,
        exec: exec_for(cfg.jobs),
        force: a.force,
    };
    let m = compile(&cfg, &opts)?;
    eprintln!("manifest: {}", m.path().display());
    print_json(&m.header);
    Ok(())
}

/// `0` means all cores.
fn exec_for(jobs: usize) -> Exec {
    match jobs {
        0 => Exec::Parallel { threads: 0 },
        n => Exec::from_jobs(n),
    }
}

fn run_split(a: SplitArgs) -> CmdResult {
    let mut cfg = CompileConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let map = plan_split(&cfg, exec_for(cfg.jobs))?;
    match a.out {
        Some(path) => save_split_csv(&map, &path)?,
        None => write_split_csv(&map, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_stats(a: StatsArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let mode = if a.per_image_mean { StatsMode::PerImageMean } else { StatsMode::PerPixel };
    let stats = manifest_stats(&m, a.split, mode, exec_for(a.jobs))?;
    print_json(&stats);
    Ok(())
}

fn run_verify(a: VerifyArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let report = verify(&m, VerifyOptions { hash: a.hash });
    print_json(&report);
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Findings(format!("{} finding(s)", report.findings.len())))
    }
}

fn run_augment(a: AugmentArgs) -> CmdResult {
    if !a.preview {
        return Err(Failure::Usage("only --preview is supported".into()));
    }
    let cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            serde_json::from_str::<AugmentConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => AugmentConfig::default(),
    };
    cfg.validate()?;
    let m = Manifest::load(&a.manifest)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let records: Vec<_> = m.split_records(Split::Train).take(a.count).collect();
    for (i, r) in records.iter().enumerate() {
        let rel = r.path.as_deref().ok_or_else(|| Error::Manifest("record without path".into()))?;
        let img = Raster::load_png(&m.resolve(rel))?;
        let mask = match &r.target {
            pathpatch::sampler::Target::Mask { file, .. } if cfg.segmentation_mode => Some(Raster::load_png(&m.resolve(file))?),
            _ => None,
        };
        let (out, out_mask) = apply_train(&img, mask.as_ref(), &cfg, &AugRng::new(a.seed, i as u64))?;
        preview_u8(&out, &cfg).save_png(&a.out.join(format!("{i:04}.png")))?;
        if let Some(mk) = out_mask {
            mk.save_png(&a.out.join(format!("{i:04}_mask.png")))?;
        }
    }
    eprintln!("wrote {} previews to {}", records.len(), a.out.display());
    Ok(())
}

/// Undoes normalization for viewing.
fn preview_u8(img: &Raster<f32>, cfg: &AugmentConfig) -> Raster<u8> {
    let n = &cfg.normalize;
    Raster::from_fn(img.width(), img.height(), 3, |x, y, c| {
        let v = img.get(x, y, c) as f64 * n.std[c as usize] + n.mean[c as usize];
        pathpatch::raster::quantize(v as f32)
    })
}

fn run_protocol(a: ProtocolArgs) -> CmdResult {
    if a.list {
        for name in preset_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let name = a.preset.expect("clap enforces --preset");
    print_json(&protocol(&name, a.samples)?);
    Ok(())
}

fn run_subset(a: SubsetArgs) -> CmdResult {
    let m = Manifest::load(&a.manifest)?;
    let records = match a.fraction {
        Some(f) => fraction_subset(&m.records, f, a.seed)?,
        None => {
            if a.organs.is_empty() {
                return Err(Failure::Usage("--tiny needs --organs".into()));
            }
            tiny_subset(&m.records, &a.organs, a.slides_per_organ, a.patches_per_slide, a.seed)?
        }
    };
    let sub = m.with_records(records);
    sub.save_as(&a.out)?;
    print_json(&sub.header.counts);
    Ok(())
}

fn run_synth(a: SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        slides: a.slides,
        size_px: a.size_px,
        base_mpp: a.base_mpp,
        tumor_annotations: a.tumor_annotations,
        segmentation_masks: a.segmentation_masks,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let dirs = write_synthetic_corpus(&a.out, &spec, Exec::default())?;
    eprintln!("wrote {} slides to {}", dirs.len(), a.out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compile(a) => run_compile(a),
        Command::Split(a) => run_split(a),
        Command::Stats(a) => run_stats(a),
        Command::Verify(a) => run_verify(a),
        Command::Augment(a) => run_augment(a),
        Command::Protocol(a) => run_protocol(a),
        Command::Subset(a) => run_subset(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Findings(msg)) => {
            eprintln!("findings: {msg}");
            ExitCode::from(EXIT_FINDINGS)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
