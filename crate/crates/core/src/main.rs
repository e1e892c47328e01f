use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use moe_ssm::bench::{run_sweep, write_csv, SweepConfig};
use moe_ssm::cost::{flop_model, CostDims, CostModel, Design};
use moe_ssm::theory::{eval_poly, expressivity_demo, sigmoid, uniform_grid};
use moe_ssm::verify::{format_table, gradient_suite, run_verification, ssd_suite, summarize, VerifyConfig};
use moe_ssm::{Error, TransitionKind};

#[derive(Parser)]
#[command(
    name = "moe-ssm",
    version,
    about = "MoE-SSM kernels, property checks and cost benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every property check over seeded instances.
    Verify {
        #[arg(long, env = "MOE_SSM_SEED", default_value_t = 0)]
        seed: u64,
        /// Instances per randomized suite.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Also write one CSV row per (check, instance).
        #[arg(long)]
        report: Option<String>,
    },
    /// Timing sweep of both designs, as CSV.
    Bench {
        #[arg(long = "T", value_delimiter = ',', required = true)]
        t: Vec<usize>,
        #[arg(long = "N", value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long = "P", value_delimiter = ',', required = true)]
        p: Vec<usize>,
        #[arg(long = "E", value_delimiter = ',', required = true)]
        e: Vec<usize>,
        #[arg(long = "k", value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "mixed,separated")]
        designs: Vec<Design>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, env = "MOE_SSM_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "diagonal")]
        transition: TransitionKind,
        /// Run separated experts on the thread pool.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<String>,
    },
    /// Analytic FLOP counts.
    Flops {
        /// One design; both when omitted.
        #[arg(long)]
        design: Option<Design>,
        #[arg(long = "T")]
        t: u64,
        #[arg(long = "N")]
        n: u64,
        #[arg(long = "P")]
        p: u64,
        #[arg(long = "E")]
        e: u64,
        #[arg(long = "k")]
        k: u64,
        #[arg(long, default_value = "dense")]
        transition: TransitionKind,
    },
    /// Sigmoid reproduced by two bias-only experts, against the best cubic.
    DemoExpressivity {
        #[arg(long, default_value_t = 161)]
        points: usize,
    },
    /// Finite-difference and dot-product gradient report.
    Gradcheck {
        #[arg(long, env = "MOE_SSM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Chunked vs sequential scan deviations.
    SsdEquiv {
        #[arg(long, env = "MOE_SSM_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn usage_error(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}\n");
    let _ = Cli::command().print_help();
    ExitCode::from(2)
}

fn open_out(path: Option<&str>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {p}"))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify {
            seed,
            instances,
            report,
        } => {
            let cfg = VerifyConfig {
                instances,
                ..VerifyConfig::new(seed)
            };
            let records = run_verification(&cfg);
            let rows = summarize(&records);
            print!("{}", format_table(&rows));
            let failed = rows.iter().filter(|r| !r.ok()).count();
            println!("seed {seed}: {} checks, {failed} failed", rows.len());
            if let Some(path) = report {
                write_csv(open_out(Some(&path))?, &records)?;
            }
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Bench {
            t,
            n,
            p,
            e,
            k,
            designs,
            repeats,
            warmup,
            seed,
            transition,
            parallel,
            out,
        } => {
            let cfg = SweepConfig {
                t,
                n,
                p,
                e,
                k,
                designs,
                repeats,
                warmup,
                seed,
                transition,
                parallel,
            };
            if let Err(err) = cfg.validate() {
                return Ok(usage_error(err));
            }
            let records = run_sweep(&cfg)?;
            write_csv(open_out(out.as_deref())?, &records)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Flops {
            design,
            t,
            n,
            p,
            e,
            k,
            transition,
        } => {
            let dims = CostDims { t, n, p, e, k };
            let model = CostModel::new(transition);
            let designs = design.map_or(vec![Design::Mixed, Design::Separated], |d| vec![d]);
            println!("design,T,N,P,E,k,recurrence,mixing,routing,total");
            for d in designs {
                let c = match flop_model(d, dims, model) {
                    Ok(c) => c,
                    Err(err) => return Ok(usage_error(err)),
                };
                println!(
                    "{d},{t},{n},{p},{e},{k},{},{},{},{}",
                    c.recurrence, c.mixing, c.routing, c.total
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DemoExpressivity { points } => {
            if points < 5 {
                return Ok(usage_error("need at least 5 grid points"));
            }
            let r = expressivity_demo(&uniform_grid(-8.0, 8.0, points))?;
            println!("x,layer,sigmoid,cubic");
            for (&x, &y) in r.grid.iter().zip(&r.outputs) {
                println!("{x},{y},{},{}", sigmoid(x), eval_poly(&r.poly_coeffs, x));
            }
            eprintln!("max |layer - sigmoid| = {:.3e}", r.sigmoid_error);
            eprintln!("max |cubic - sigmoid| = {:.6}", r.poly_gap);
            eprintln!("cubic coefficients = {:?}", r.poly_coeffs);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let mut records = Vec::new();
            gradient_suite(&VerifyConfig::new(seed), &mut records);
            let rows = summarize(&records);
            print!("{}", format_table(&rows));
            Ok(if rows.iter().all(|r| r.ok()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::SsdEquiv { seed, instances } => {
            let cfg = VerifyConfig {
                ssd_instances: instances,
                ..VerifyConfig::new(seed)
            };
            let mut records = Vec::new();
            ssd_suite(&cfg, &mut records);
            let rows = summarize(&records);
            print!("{}", format_table(&rows));
            Ok(if rows.iter().all(|r| r.ok()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            if let Some(Error::InvalidInput(_)) = err.downcast_ref::<Error>() {
                return usage_error(err);
            }
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
