//! `anticonc`: run the anti-concentration experiments from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 every requested bound is
//! inapplicable, 4 input/output failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anticonc::bootstrap::Multiplier;
use anticonc::design::{gen_design, DesignConfig, DesignKind};
use anticonc::experiment::{
    run_bootstrap_demo, run_bounds_compare, run_levy_experiment, run_scaling_study, selftest, BootstrapConfig,
    ExperimentConfig, Overrides, RunManifest, ScalingConfig, ScalingKind,
};
use anticonc::gaussian::{check_conditions, rho_bar};
use anticonc::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_INAPPLICABLE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "anticonc", version, about = "Anti-concentration lab for differences of Gaussian maxima")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config file (a previous run manifest also works)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Monte Carlo replications
    #[arg(long, global = true, value_name = "N")]
    reps: Option<usize>,
    /// Comma-separated interval half-widths
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Points of the t-grid
    #[arg(long, global = true, value_name = "N")]
    grid: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a covariance design and write it as JSON
    GenDesign(DesignArgs),
    /// Lévy concentration of M_B - M_A over the epsilon list
    Levy(DesignArgs),
    /// Empirical concentration against every bound at one epsilon
    BoundsCompare(DesignArgs),
    /// Scaling study in rho or in p
    Scaling {
        /// rho_sweep_fullrank, rho_sweep_lowrank or k0_sweep
        #[arg(long)]
        study: Option<String>,
    },
    /// Multiplier bootstrap of the argmax probability on a CSV data file
    Bootstrap {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Comma-separated column indices forming A
        #[arg(long, value_delimiter = ',')]
        a: Option<Vec<usize>>,
        /// gaussian or beta
        #[arg(long)]
        multiplier: Option<String>,
    },
    /// Check that results do not depend on the thread count
    Selftest,
}

#[derive(Args)]
struct DesignArgs {
    /// Design kind; replaces the config's design section when it differs
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    p: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Parse { .. } => EXIT_IO,
        Error::Inapplicable { .. } => EXIT_INAPPLICABLE,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> anticonc::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        reps: common.reps,
        eps: common.eps.clone(),
        grid: common.grid,
        threads: common.threads,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn apply_design_args(cfg: &mut ExperimentConfig, args: &DesignArgs) -> anticonc::Result<()> {
    if let Some(kind) = &args.design {
        let kind: DesignKind = kind.parse()?;
        let keep = cfg.design.as_ref().is_some_and(|d| d.kind == kind);
        if !keep {
            let p = cfg.design.as_ref().map_or(anticonc::design::DEFAULT_P, |d| d.p);
            cfg.design = Some(DesignConfig::new(kind, p));
        }
    }
    if let Some(p) = args.p {
        match cfg.design.as_mut() {
            Some(d) => d.p = p,
            None => return Err(Error::BadConfig("--p needs a design kind".into())),
        }
    }
    Ok(())
}

fn prepare_out(dir: &Path) -> anticonc::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> anticonc::Result<u8> {
    let mut cfg = load_config(&cli.common)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::BadConfig(format!("thread pool: {e}")))?;
    }
    let out = cfg.out_dir();
    let mut code = 0;
    let name;
    let mut manifest;
    match &cli.command {
        Command::GenDesign(args) => {
            name = "gen-design";
            apply_design_args(&mut cfg, args)?;
            let dc = cfg.design_config()?;
            let d = gen_design(&dc)?;
            prepare_out(&out)?;
            let rb = rho_bar(&d.spec, &d.part).ok();
            let cond = check_conditions(&d.spec, &d.part).ok();
            let doc = serde_json::json!({
                "id": d.id,
                "config": dc,
                "spec": d.spec,
                "partition": d.part,
                "sigma_hat": d.sigma_hat,
                "rho_bar": rb,
                "conditions": cond,
            });
            manifest = RunManifest::start(name, &cfg);
            let path = manifest.write_json(&out, "design.json", &doc)?;
            println!("{}: p = {}, |A| = {}, |B| = {} -> {}", d.id, d.spec.dim(), d.part.a().len(), d.part.b().len(), path.display());
        }
        Command::Levy(args) => {
            name = "levy";
            apply_design_args(&mut cfg, args)?;
            let d = gen_design(&cfg.design_config()?)?;
            let table = run_levy_experiment(&d, &cfg.sorted_epsilons(), cfg.n_rep, cfg.grid, cfg.seed)?;
            prepare_out(&out)?;
            manifest = RunManifest::start(name, &cfg);
            let path = manifest.write_table(&out, "levy.csv", &table)?;
            println!("{}: {} rows -> {}", d.id, table.len(), path.display());
        }
        Command::BoundsCompare(args) => {
            name = "bounds-compare";
            apply_design_args(&mut cfg, args)?;
            let d = gen_design(&cfg.design_config()?)?;
            // The default sweep stands for "not given"; compare at 0.05 then.
            let eps = match cfg.sorted_epsilons().as_slice() {
                [e] => *e,
                _ if cfg.epsilons == anticonc::experiment::DEFAULT_EPSILONS => 0.05,
                _ => return Err(Error::BadConfig("bounds-compare takes exactly one epsilon".into())),
            };
            cfg.epsilons = vec![eps];
            let cmp = run_bounds_compare(&d, eps, cfg.n_rep, cfg.grid, cfg.seed, &cfg.bound_config())?;
            prepare_out(&out)?;
            manifest = RunManifest::start(name, &cfg);
            manifest.write_table(&out, "compare.csv", &cmp.compare)?;
            manifest.write_table(&out, "table1.csv", &cmp.ratios)?;
            manifest.write_json(&out, "bounds.json", &cmp.report)?;
            println!("{}: empirical {:.6} at eps = {eps}", d.id, cmp.levy.value);
            for (n, v) in cmp.report.applicable() {
                println!("  {n:<9} {v:.6}");
            }
            for f in cmp.report.flags() {
                println!("  inapplicable {f}");
            }
            if cmp.report.applicable().is_empty() {
                code = EXIT_INAPPLICABLE;
            }
        }
        Command::Scaling { study } => {
            name = "scaling";
            let mut sc = cfg.scaling.clone();
            if let Some(s) = study {
                let kind: ScalingKind = serde_json::from_value(serde_json::Value::String(s.clone()))
                    .map_err(|_| Error::BadConfig(format!("unknown scaling study {s:?}")))?;
                if sc.as_ref().is_none_or(|c| c.kind != kind) {
                    sc = Some(ScalingConfig::new(kind));
                }
            }
            let sc = sc.ok_or_else(|| Error::BadConfig("scaling needs --study or a scaling section".into()))?;
            cfg.scaling = Some(sc.clone());
            let table = run_scaling_study(&sc, cfg.n_rep, cfg.grid, cfg.seed)?;
            prepare_out(&out)?;
            manifest = RunManifest::start(name, &cfg);
            let path = manifest.write_table(&out, "scaling.csv", &table)?;
            println!("{} points -> {}", table.len(), path.display());
        }
        Command::Bootstrap { data, a, multiplier } => {
            name = "bootstrap";
            let mut bc = match (cfg.bootstrap.clone(), data, a) {
                (Some(b), _, _) => b,
                (None, Some(d), Some(a)) => BootstrapConfig {
                    data: d.clone(),
                    a: a.clone(),
                    b_reps: anticonc::experiment::DEFAULT_B_REPS,
                    multiplier: Multiplier::Gaussian,
                    quantiles: anticonc::bootstrap::DEFAULT_QUANTILES.to_vec(),
                    shift: None,
                },
                _ => return Err(Error::BadConfig("bootstrap needs --data and --a or a bootstrap section".into())),
            };
            if let Some(d) = data {
                bc.data = d.clone();
            }
            if let Some(a) = a {
                bc.a = a.clone();
            }
            if let Some(m) = multiplier {
                bc.multiplier = m.parse().map_err(|e: Error| Error::BadConfig(e.to_string()))?;
            }
            if let Some(r) = cli.common.reps {
                bc.b_reps = r;
            }
            cfg.bootstrap = Some(bc.clone());
            let demo = run_bootstrap_demo(&bc, cfg.seed)?;
            prepare_out(&out)?;
            manifest = RunManifest::start(name, &cfg);
            let path = manifest.write_json(&out, "bootstrap.json", &demo)?;
            println!("P(M_A > M_B) = {:.6} over {} replicates -> {}", demo.result.prob, demo.result.b_reps, path.display());
        }
        Command::Selftest => {
            name = "selftest";
            let reps = cli.common.reps.unwrap_or(100_000);
            let report = selftest(cfg.seed, reps)?;
            prepare_out(&out)?;
            manifest = RunManifest::start(name, &cfg);
            manifest.write_json(&out, "selftest.json", &report)?;
            println!(
                "selftest: threads {:?}, {} bytes, identical = {}",
                report.threads, report.bytes, report.identical
            );
            if !report.identical {
                code = 1;
            }
        }
    }
    let path = manifest.finish(&out)?;
    eprintln!("{name}: manifest {}", path.display());
    Ok(code)
}
