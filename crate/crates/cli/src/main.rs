use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dpfl_core::accountant::{third_party_epsilon, PrivacyLedger};
use dpfl_core::runner::{self, compare, resolve_output_dir, Arm, Preset, RunConfig, KEYS};

/// Differentially private federated AdamW simulator.
#[derive(Parser)]
#[command(name = "dpfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, histograms.csv and summary.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides as `--key value` or `--key=value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Run paired-seed ablations and write comparison tables.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in sweep: gamma, components or aggregation.
        #[arg(long, conflicts_with = "arm")]
        preset: Option<String>,
        /// Custom arm `label:key=value,key=value`; repeatable.
        #[arg(long)]
        arm: Vec<String>,
        /// Axes the custom arms may vary, comma separated.
        #[arg(long, value_delimiter = ',')]
        axes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Print the privacy budget per round as CSV.
    Account {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        sample_rate: f64,
        #[arg(long)]
        local_steps: u64,
        #[arg(long)]
        rounds: u32,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
    /// Print the canonical config and its hash.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    for (k, v) in parse_overrides(overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--key value` / `--key=value` pairs; keys must be config keys.
fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!("expected a --key flag, got '{arg}'");
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v.clone())
            }
        };
        if !KEYS.contains(&key.as_str()) {
            bail!("unknown config key '--{key}'");
        }
        out.push((key, value));
    }
    Ok(out)
}

fn parse_arm(spec: &str) -> Result<Arm> {
    let (label, rest) = spec
        .split_once(':')
        .with_context(|| format!("arm '{spec}' must look like label:key=value,..."))?;
    let mut overrides = Vec::new();
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("arm '{label}': '{kv}' is not key=value"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(Arm {
        label: label.to_string(),
        overrides,
    })
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let summary = runner::run(&cfg)?;
            print!("{}", runner::summary_json(&summary)?);
            eprintln!(
                "wrote {} in {:.2}s",
                resolve_output_dir(&cfg).display(),
                summary.wall_time_secs
            );
        }
        Command::Compare {
            config,
            preset,
            arm,
            axes,
            seeds,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let (axes, arms): (Vec<String>, Vec<Arm>) = match preset {
                Some(p) => {
                    let p: Preset = p.parse()?;
                    (p.axes().into_iter().map(String::from).collect(), p.arms())
                }
                None if arm.is_empty() => (Vec::new(), vec![Arm::new("base", &[])]),
                None => (axes, arm.iter().map(|s| parse_arm(s)).collect::<Result<_>>()?),
            };
            let axes: Vec<&str> = axes.iter().map(String::as_str).collect();
            let table = compare(&cfg, &axes, &arms, &seeds)?;
            let dir = resolve_output_dir(&cfg);
            table.write(&dir)?;
            print!("{}", table.summary_csv());
            eprintln!("wrote {}", dir.display());
        }
        Command::Account {
            sigma,
            sample_rate,
            local_steps,
            rounds,
            delta,
        } => {
            let mut ledger = PrivacyLedger::new();
            println!("round,eps_rdp,eps_paper");
            for t in 1..=rounds {
                ledger.record(sigma, sample_rate, local_steps)?;
                let eps = ledger.compose_and_convert(delta)?.epsilon;
                let paper = third_party_epsilon(sample_rate, u64::from(t), local_steps, delta, sigma)?;
                println!("{t},{},{}", runner::fmt_float(eps), runner::fmt_float(paper));
            }
        }
        Command::Config { config, overrides } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            print!("{}", cfg.canonical_text());
            println!("# hash = {}", cfg.hash());
        }
    }
    Ok(())
}
