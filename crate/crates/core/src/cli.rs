//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`, `ablate`, `attn-dump`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::ablation::run_ablation;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::evaluator::{attn_export, checkpoint_dir, evaluate};
use crate::model::Model;
use crate::synthdata::{generate_corpus, Corpus};
use crate::trainer::{gradient_check, load_inputs, train_to_dir, GradcheckOptions};

#[derive(Parser, Debug)]
#[command(name = "fba", about = "Foreground/background cross-modal re-identification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file (missing keys take their defaults)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// override one config key, e.g. --set loss.lambda=0 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// sets both train.seed and data.seed
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (images, manifest, vocabulary)
    Synth(Common),
    /// Train on the corpus at data.root
    Train(Common),
    /// Evaluate a checkpoint; prints the report as JSON
    Eval {
        #[command(flatten)]
        common: Common,
        /// also dump the embedding matrix as an FBT1 tensor
        #[arg(long, value_name = "PATH")]
        features: Option<PathBuf>,
    },
    /// Finite-difference check of the total loss gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// random scalar coordinates checked besides one direction per tensor
        #[arg(long, default_value_t = 512)]
        coords: usize,
        /// check every trainable scalar
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// maximum accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate the four loss-component configurations
    Ablate(Common),
    /// Export cross-attention maps, similarity, mask and saliency as CSV
    AttnDump {
        #[command(flatten)]
        common: Common,
        /// manifest row of the image (default: first test image)
        #[arg(long)]
        index: Option<usize>,
    },
}

fn key_listing() -> String {
    let keys = Config::default().flat_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (defaults):\n");
    for (k, v) in keys {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn command() -> clap::Command {
    let keys = key_listing();
    let mut cmd = Cli::command().after_help(keys.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let k = keys.clone();
        cmd = cmd.mut_subcommand(n, move |s| s.after_help(k));
    }
    cmd
}

/// Rendered `--help` text of one subcommand.
pub fn help_text(subcommand: &str) -> String {
    let mut cmd = command();
    match cmd.find_subcommand_mut(subcommand) {
        Some(s) => s.render_long_help().to_string(),
        None => cmd.render_long_help().to_string(),
    }
}

fn resolve(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let print = |out: &mut std::io::StdoutLock, s: &str| out.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e));
    match cmd {
        Command::Synth(c) => {
            let cfg = resolve(&c)?;
            let root = c.out.unwrap_or_else(|| cfg.data.root.clone().into());
            let records = generate_corpus(&cfg.data, &root, cfg.encoder.max_text_len)?;
            print(&mut out, &format!("wrote {} images to {}\n", records.len(), root.display()))
        }
        Command::Train(c) => {
            let mut cfg = resolve(&c)?;
            if let Some(o) = &c.out {
                cfg.train.out = o.display().to_string();
            }
            let corpus = Corpus::load(Path::new(&cfg.data.root))?;
            let outcome = train_to_dir(&cfg, &corpus, Path::new(&cfg.train.out))?;
            let last = outcome.log.last().map_or(f64::NAN, |l| l.losses.total);
            print(&mut out, &format!("{} steps, final total loss {last:.6}, run dir {}\n", outcome.log.len(), cfg.train.out))
        }
        Command::Eval { common, features } => {
            let cfg = resolve(&common)?;
            let model = Model::load(&checkpoint_dir(&cfg))?;
            let corpus = Corpus::load(Path::new(&cfg.data.root))?;
            let (report, gallery) = evaluate(&cfg, &model, &corpus)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(dir) = &common.out {
                write_file(&dir.join("report.json"), json.as_bytes())?;
            }
            if let Some(p) = features {
                let mut buf = Vec::new();
                gallery.features.write_fbt(&mut buf).map_err(|e| Error::io(&p, e))?;
                write_file(&p, &buf)?;
            }
            print(&mut out, &json)
        }
        Command::Gradcheck { common, coords, exhaustive, eps, tol } => {
            let cfg = resolve(&common)?;
            let opts = GradcheckOptions { eps, coords, exhaustive, ..GradcheckOptions::default() };
            let report = gradient_check(&cfg, &opts)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(dir) = &common.out {
                write_file(&dir.join("gradcheck.json"), json.as_bytes())?;
            }
            print(&mut out, &json)?;
            if report.max_rel_error > tol {
                return Err(Error::Eval(format!("gradient check failed: max relative error {:e} > {tol:e}", report.max_rel_error)));
            }
            Ok(())
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c)?;
            let dir = c.out.unwrap_or_else(|| Path::new(&cfg.train.out).join("ablate"));
            let corpus = Corpus::load(Path::new(&cfg.data.root))?;
            let seeds: Vec<u64> = (0..cfg.eval.ablate_seeds as u64).map(|i| cfg.train.seed + i).collect();
            let table = run_ablation(&cfg, &corpus, &seeds, |name, r| {
                eprintln!("{name} seed {}: mAP {:.4} R-1 {:.4}", r.seed, r.map, r.rank1);
            })?;
            let json = serde_json::to_string_pretty(&table)? + "\n";
            write_file(&dir.join("ablation.json"), json.as_bytes())?;
            let text = table.to_text();
            write_file(&dir.join("ablation.txt"), text.as_bytes())?;
            print(&mut out, &text)
        }
        Command::AttnDump { common, index } => {
            let cfg = resolve(&common)?;
            let model = Model::load(&checkpoint_dir(&cfg))?;
            let corpus = Corpus::load(Path::new(&cfg.data.root))?;
            let i = match index {
                Some(i) => i,
                None => corpus
                    .records
                    .iter()
                    .position(|r| r.pid >= cfg.data.train_ids)
                    .ok_or_else(|| Error::Data("manifest has no test images".into()))?,
            };
            let rec = corpus
                .records
                .get(i)
                .ok_or_else(|| Error::Data(format!("index {i} out of range ({} records)", corpus.records.len())))?;
            let input = load_inputs(&model, &corpus, std::slice::from_ref(rec))?.remove(0);
            let dir = common.out.unwrap_or_else(|| PathBuf::from("attn"));
            let ex = attn_export(&model, &input, &cfg.loss, &dir)?;
            print(
                &mut out,
                &format!("{}: W_f {}x{}, written to {}\n", rec.image, ex.w_fg.rows(), ex.w_fg.cols(), dir.display()),
            )
        }
    }
}

/// Run the CLI. Returns 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
