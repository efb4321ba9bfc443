//! `certrain`: train, evaluate, certify and attack from a run config, plus
//! the toy-network sweep and the catastrophic-overfitting probe.
//!
//! Every command writes its resolved configuration into the output directory
//! before doing anything else. Exit codes: 0 success, 1 configuration or
//! checkpoint error, 2 numerical failure, 3 I/O or data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use certrain::attacks;
use certrain::bounds::{self, BoundOptions};
use certrain::config::{load_config, OUT_DIR_ENV};
use certrain::network::{load_checkpoint, save_checkpoint};
use certrain::rng::derive_seed;
use certrain::train::{co_probe, evaluate, read_metrics_csv, toy_sweep, train, write_metrics_csv, write_toy_csv, CoThresholds};
use certrain::{write_atomic, BnMode, Dataset, Error, LossFamily, Network, Result, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "certrain", version, about = "Certified and adversarial training experiments")]
struct Cli {
    /// Output directory. Takes precedence over `output.dir` and $CERTTRAIN_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// `section.key=value` override, applied after parsing. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `checkpoint.json` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Val)]
    split: Part,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    Train,
    Val,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write `checkpoint.json` and `metrics.csv`.
    Train(RunArgs),
    /// Clean, PGD and IBP-certified accuracy of a checkpoint (`eval.csv`).
    Eval(ModelArgs),
    /// Per-sample IBP certification (`certify.csv`).
    Certify {
        #[command(flatten)]
        model: ModelArgs,
        /// Radius; defaults to the eval radius of the config.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Runs the configured attack on a checkpoint (`attack.csv`).
    Attack(ModelArgs),
    /// Expressive losses on the toy networks over depth and `w` (`toy.csv`).
    ToySweep {
        #[arg(long, value_delimiter = ',', default_values_t = [3, 6, 9, 12, 15, 18, 21])]
        depths: Vec<usize>,
        /// Defaults to 0 and 13 log-spaced values from 1e-6 to 1.
        #[arg(long = "w", value_delimiter = ',')]
        w_grid: Vec<f64>,
        /// `family:alpha` pairs.
        #[arg(long = "family", value_delimiter = ',', default_values_t = ["mtl-ibp:0.01".to_string(), "exp-ibp:0.1".to_string(), "cc-ibp:0.01".to_string(), "sabr:0.01".to_string()])]
        families: Vec<String>,
    },
    /// Flags catastrophic overfitting in a metrics CSV.
    CoProbe {
        metrics: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        pgd_below: f64,
        #[arg(long, default_value_t = 0.6)]
        train_above: f64,
        /// Centered moving-average window, in epochs.
        #[arg(long, default_value_t = 1)]
        window: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::UnknownPreset(_) | Error::InvalidNetwork(_) => 1,
        Error::Io { .. } | Error::Idx(_) | Error::LabelOutOfRange { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::Train(args) => cmd_train(&setup(&args, out.as_deref())?),
        Command::Eval(m) => {
            let cfg = setup(&m.run, out.as_deref())?;
            cmd_eval(&cfg, &checkpoint(&cfg, &m)?, m.split)
        }
        Command::Certify { model, eps } => {
            let cfg = setup(&model.run, out.as_deref())?;
            cmd_certify(&cfg, &checkpoint(&cfg, &model)?, model.split, eps)
        }
        Command::Attack(m) => {
            let cfg = setup(&m.run, out.as_deref())?;
            cmd_attack(&cfg, &checkpoint(&cfg, &m)?, m.split)
        }
        Command::ToySweep {
            depths,
            w_grid,
            families,
        } => cmd_toy_sweep(&plain_out(out), depths, w_grid, &families),
        Command::CoProbe {
            metrics,
            pgd_below,
            train_above,
            window,
        } => {
            let th = CoThresholds {
                pgd_below,
                train_above,
                window,
            };
            cmd_co_probe(&plain_out(out), &metrics, &th)
        }
    }
}

/// Loads the config with overrides (and `--out` as a final override), then
/// writes the resolved dump.
fn setup(args: &RunArgs, out: Option<&Path>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(dir) = out {
        overrides.push(format!("output.dir={:?}", dir.display().to_string()));
    }
    let cfg = load_config(&args.config, &overrides)?;
    write_atomic(&cfg.output_dir().join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(cfg)
}

fn plain_out(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn checkpoint(cfg: &RunConfig, m: &ModelArgs) -> Result<Network> {
    let path = m.checkpoint.clone().unwrap_or_else(|| cfg.output_dir().join("checkpoint.json"));
    load_checkpoint(&path)
}

fn part(data: &Dataset, p: Part) -> Dataset {
    match p {
        Part::Train => data.train_part(),
        Part::Val => data.val_part(),
        Part::All => data.clone(),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.load_dataset()?;
    let mut net = cfg.build_network(data.sample_shape(), data.num_classes())?;
    let rows = train(&mut net, &data, &cfg.train_plan(), &cfg.loss_spec(), &cfg.eval_config(), |m| {
        eprintln!(
            "epoch {:>3}  clean {:.4}  train-attack {:.4}  pgd {:.4}  ibp-cert {:.4}  lr {:.3e}  eps {:.4}",
            m.epoch, m.clean_acc, m.attack_train_acc, m.pgd_acc, m.ibp_cert_acc, m.lr, m.eps_bound
        );
    })?;
    let dir = cfg.output_dir();
    write_metrics_csv(dir.join("metrics.csv"), &rows, cfg.output.wall_clock)?;
    save_checkpoint(&net, &dir.join("checkpoint.json"))?;
    if let Some(last) = rows.last() {
        println!(
            "trained {} epochs: clean {:.4}, pgd {:.4}, ibp-certified {:.4}",
            last.epoch, last.clean_acc, last.pgd_acc, last.ibp_cert_acc
        );
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, net: &Network, p: Part) -> Result<()> {
    let data = part(&cfg.load_dataset()?, p);
    let m = evaluate(net, &data, &cfg.eval_config())?;
    let csv = format!(
        "clean_acc,pgd_acc,ibp_cert_acc,ibp_loss,forwabs_gap\n{},{},{},{},{}\n",
        m.clean_acc, m.pgd_acc, m.ibp_cert_acc, m.ibp_loss, m.forwabs_gap
    );
    write_atomic(&cfg.output_dir().join("eval.csv"), csv.as_bytes())?;
    println!(
        "clean {:.4}, pgd {:.4}, ibp-certified {:.4}, ibp loss {:.4e}, forwabs gap {:.4e}",
        m.clean_acc, m.pgd_acc, m.ibp_cert_acc, m.ibp_loss, m.forwabs_gap
    );
    Ok(())
}

fn cmd_certify(cfg: &RunConfig, net: &Network, p: Part, eps: Option<f64>) -> Result<()> {
    let eps = eps.unwrap_or(cfg.eval_config().eps);
    let data = part(&cfg.load_dataset()?, p);
    let mut csv = String::from("index,label,predicted,certified,min_lower_bound\n");
    let mut certified = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.eval.batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let pred = net.predict(&x)?.argmax_rows();
        let state = bounds::ibp_bounds(net, &x, &y, eps, BoundOptions::default())?;
        for (j, m) in bounds::min_lower_bounds(&state.lower, &y).into_iter().enumerate() {
            let ok = m >= 0.0;
            certified += ok as usize;
            csv.push_str(&format!("{},{},{},{},{}\n", chunk[j], y[j], pred[j], ok, m));
        }
    }
    write_atomic(&cfg.output_dir().join("certify.csv"), csv.as_bytes())?;
    println!(
        "certified accuracy {:.4} ({certified}/{}) at eps {eps}",
        certified as f64 / data.len().max(1) as f64,
        data.len()
    );
    Ok(())
}

fn cmd_attack(cfg: &RunConfig, net: &Network, p: Part) -> Result<()> {
    let data = part(&cfg.load_dataset()?, p);
    let base = cfg.attack_config();
    let mut csv = String::from("index,label,clean_pred,adv_pred\n");
    let mut robust = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for (n, chunk) in idx.chunks(cfg.eval.batch_size.max(1)).enumerate() {
        let (x, y) = data.batch(chunk);
        let a = base.clone().with_seed(derive_seed(base.seed, "cli-attack", n as u64));
        let adv = attacks::attack(net, &x, &y, &a, BnMode::Running)?;
        let clean = net.predict(&x)?.argmax_rows();
        let attacked = net.predict(&adv.x_adv)?.argmax_rows();
        for j in 0..chunk.len() {
            robust += (attacked[j] == y[j]) as usize;
            csv.push_str(&format!("{},{},{},{}\n", chunk[j], y[j], clean[j], attacked[j]));
        }
    }
    write_atomic(&cfg.output_dir().join("attack.csv"), csv.as_bytes())?;
    println!(
        "{} accuracy {:.4} ({robust}/{}) at eps {}",
        base.kind,
        robust as f64 / data.len().max(1) as f64,
        data.len(),
        base.eps
    );
    Ok(())
}

fn parse_families(items: &[String]) -> Result<Vec<(LossFamily, f64)>> {
    items
        .iter()
        .map(|s| {
            let bad = || {
                Error::Config(certrain::ConfigError::Invalid {
                    field: "family".into(),
                    message: format!("expected family:alpha, got `{s}`"),
                })
            };
            let (f, a) = s.split_once(':').ok_or_else(bad)?;
            let alpha: f64 = a.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&alpha) {
                return Err(bad());
            }
            Ok((f.parse()?, alpha))
        })
        .collect()
}

fn cmd_toy_sweep(out: &Path, depths: Vec<usize>, mut w_grid: Vec<f64>, families: &[String]) -> Result<()> {
    if w_grid.is_empty() {
        w_grid.push(0.0);
        w_grid.extend((0..=12).map(|j| 10f64.powf(-6.0 + 0.5 * j as f64)));
    }
    let fams = parse_families(families)?;
    let list = |v: Vec<String>| v.join(", ");
    let dump = format!(
        "depths = [{}]\nw = [{}]\nfamilies = [{}]\n",
        list(depths.iter().map(|d| d.to_string()).collect()),
        list(w_grid.iter().map(|w| format!("{w:e}")).collect()),
        list(families.iter().map(|f| format!("{f:?}")).collect())
    );
    write_atomic(&out.join("toy-sweep.toml"), dump.as_bytes())?;
    let rows = toy_sweep(&depths, &w_grid, &fams)?;
    write_toy_csv(out.join("toy.csv"), &rows)?;
    println!("{} rows written to {}", rows.len(), out.join("toy.csv").display());
    Ok(())
}

fn cmd_co_probe(out: &Path, metrics: &Path, th: &CoThresholds) -> Result<()> {
    let dump = format!(
        "metrics = {:?}\npgd-below = {:e}\ntrain-above = {:e}\nwindow = {}\n",
        metrics.display().to_string(),
        th.pgd_below,
        th.train_above,
        th.window
    );
    write_atomic(&out.join("co-probe.toml"), dump.as_bytes())?;
    let text = std::fs::read_to_string(metrics).map_err(|e| Error::Io {
        path: metrics.to_path_buf(),
        source: e,
    })?;
    let verdict = co_probe(&read_metrics_csv(&text)?, th);
    match verdict.onset_epoch {
        Some(e) if verdict.flagged => println!("catastrophic overfitting from epoch {e}"),
        _ => println!("no catastrophic overfitting"),
    }
    Ok(())
}
