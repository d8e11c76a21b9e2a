//! The `hknas` command-line tool: search, train, eval, derive and synth.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{normalize, stratified_split, synth_generate, HsiCube, LabelMap, Split};
use crate::error::{Error, Result};
use crate::mixedop::AlphaMode;
use crate::optim;
use crate::searchspace::{ArchitectureMatrix, NetMode, Network};

pub const ARCH_FILE: &str = "arch.txt";
pub const SEARCH_LOG: &str = "search_log.tsv";
pub const SEARCH_CKPT: &str = "search.ckpt";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const CUBE_FILE: &str = "cube.hsi";
pub const LABEL_FILE: &str = "labels.hsl";

#[derive(Parser, Debug)]
#[command(
    name = "hknas",
    version,
    about = "Hyper-kernel architecture search for hyperspectral images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search an architecture; writes arch.txt, search_log.tsv and search.ckpt.
    Search(CommonArgs),
    /// Train the architecture given by --arch from scratch; writes model.ckpt and train_log.tsv.
    Train(CommonArgs),
    /// Evaluate --checkpoint on the test split; writes report.tsv.
    Eval(CommonArgs),
    /// Read the architecture off a search checkpoint.
    Derive(CommonArgs),
    /// Generate the configured synthetic scene as cube.hsi and labels.hsl.
    Synth(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AlphaArg {
    Hyper,
    Free,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub alpha_mode: Option<AlphaArg>,
    #[arg(long)]
    pub two_tier: bool,
}

/// Runs the tool on `argv` and returns the process exit code.
pub fn run_from_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Search(a) => cmd_search(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Derive(a) => cmd_derive(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn load_config(a: &CommonArgs) -> Result<RunConfig> {
    let path = a
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    if let Some(m) = a.alpha_mode {
        cfg.alpha_mode = match m {
            AlphaArg::Hyper => AlphaMode::Hyper,
            AlphaArg::Free => AlphaMode::Free,
        };
    }
    cfg.two_tier |= a.two_tier;
    if cfg.two_tier && cfg.alpha_mode != AlphaMode::Free {
        return Err(Error::Config(
            "two-tier search needs free structural parameters (--alpha-mode free)".into(),
        ));
    }
    Ok(cfg)
}

struct Scene {
    cube: HsiCube,
    labels: LabelMap,
    split: Split,
}

fn load_scene(cfg: &RunConfig) -> Result<Scene> {
    let (cube, labels) = match &cfg.data {
        DataSource::Files { cube, labels } => (HsiCube::load(cube)?, LabelMap::load(labels)?),
        DataSource::Synthetic(spec) => {
            let s = synth_generate(spec)?;
            (s.cube, s.labels)
        }
    };
    labels.check_matches(&cube)?;
    let split = match &cfg.split_file {
        Some(p) => Split::parse(&fs::read_to_string(p)?)?,
        None => stratified_split(&labels, &cfg.split_spec)?,
    };
    Ok(Scene {
        cube: normalize(&cube),
        labels,
        split,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn cmd_search(a: &CommonArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let scene = load_scene(&cfg)?;
    let template = cfg.template(scene.cube.bands(), scene.labels.classes())?;
    let mut net = Network::search(&template, cfg.alpha_mode, cfg.seed)?;
    let (train, val) = (&scene.split.train, &scene.split.val);
    let (arch, log) = if cfg.two_tier {
        optim::two_tier_search(&mut net, &scene.cube, train, val, &cfg.search, cfg.seed)?
    } else {
        optim::search(&mut net, &scene.cube, train, val, &cfg.search, cfg.seed)?
    };
    let out = out_dir(&cfg)?;
    fs::write(out.join(ARCH_FILE), arch.encode())?;
    fs::write(out.join(SEARCH_LOG), log.to_text())?;
    fs::write(out.join(SPLIT_FILE), scene.split.to_text())?;
    checkpoint::save_network(out.join(SEARCH_CKPT), &net)?;
    info!("architecture written to {}", out.join(ARCH_FILE).display());
    print!("{arch}");
    Ok(())
}

fn cmd_train(a: &CommonArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let arch_path = a
        .arch
        .as_ref()
        .ok_or_else(|| Error::Config("train needs --arch".into()))?;
    let arch = ArchitectureMatrix::parse(&fs::read_to_string(arch_path)?)?;
    let scene = load_scene(&cfg)?;
    let template = cfg.template(scene.cube.bands(), scene.labels.classes())?;
    let mut net = Network::derived(&template, &arch, cfg.seed)?;
    let log = optim::train(
        &mut net,
        &scene.cube,
        &scene.split.train,
        &scene.split.val,
        &cfg.train,
        cfg.seed,
    )?;
    let out = out_dir(&cfg)?;
    checkpoint::save_network(out.join(MODEL_CKPT), &net)?;
    fs::write(out.join(TRAIN_LOG), log.to_text())?;
    info!("model written to {}", out.join(MODEL_CKPT).display());
    Ok(())
}

fn cmd_eval(a: &CommonArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let ckpt = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let net = checkpoint::load_network(ckpt)?;
    let scene = load_scene(&cfg)?;
    let t = net.template();
    if (t.bands, t.classes) != (scene.cube.bands(), scene.labels.classes()) {
        return Err(Error::Config(format!(
            "checkpoint topology ({} bands, {} classes) does not match the data ({} bands, {} classes)",
            t.bands,
            t.classes,
            scene.cube.bands(),
            scene.labels.classes()
        )));
    }
    if net.mode() != NetMode::Derived {
        return Err(Error::Config("eval needs a trained (derived) checkpoint".into()));
    }
    let report = optim::evaluate(&net, &scene.cube, &scene.split.test)?;
    let text = report.to_text();
    fs::write(out_dir(&cfg)?.join(REPORT_FILE), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_derive(a: &CommonArgs) -> Result<()> {
    let ckpt = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("derive needs --checkpoint".into()))?;
    let net = checkpoint::load_network(ckpt)?;
    let arch = net
        .derive_architecture()
        .map_err(|_| Error::Config("derive needs a search checkpoint".into()))?;
    let out = match (&a.out, &a.config) {
        (Some(o), _) => Some(o.clone()),
        (None, Some(_)) => Some(load_config(a)?.out),
        (None, None) => None,
    };
    if let Some(o) = out {
        fs::create_dir_all(&o)?;
        fs::write(o.join(ARCH_FILE), arch.encode())?;
    }
    print!("{arch}");
    Ok(())
}

fn cmd_synth(a: &CommonArgs) -> Result<()> {
    let cfg = load_config(a)?;
    let DataSource::Synthetic(mut spec) = cfg.data.clone() else {
        return Err(Error::Config("synth needs synth_* keys instead of cube/labels".into()));
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let scene = synth_generate(&spec)?;
    let out = out_dir(&cfg)?;
    scene.cube.save(out.join(CUBE_FILE))?;
    scene.labels.save(out.join(LABEL_FILE))?;
    info!("synthetic scene written to {}", out.display());
    Ok(())
}
