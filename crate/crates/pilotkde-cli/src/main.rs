#![allow(clippy::neg_cmp_op_on_partial_ord)]

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use pilotkde::coverage::{CoverageTable, ModelChoice};
use pilotkde::numerics::{integrate_pieces, normal_quantile};
use pilotkde::*;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "pilotkde", version, about = "Plug-in kernel density estimation and Edgeworth coverage study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the density of a data file at one or more points.
    #[command(allow_negative_numbers = true)]
    Estimate(EstimateArgs),
    /// Run the Monte Carlo coverage study and write tables.
    #[command(allow_negative_numbers = true)]
    Coverage(CoverageArgs),
    /// Print the population expansion constants for one cell.
    #[command(allow_negative_numbers = true)]
    Context(ContextArgs),
    /// Check the deterministic constants and quantile round trips.
    Verify,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// One real per line; `#` starts a comment.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    x: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "ustat")]
    variant: String,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    /// Flat `key = value` file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for one table per (model, x); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_parser = ["ustat", "convo", "squared"])]
    variant: Option<String>,
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, value_parser = ["csv", "markdown"])]
    format: Option<String>,
    /// Run replications on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct ContextArgs {
    #[arg(long, default_value = "1")]
    model: String,
    #[arg(long)]
    x: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "ustat")]
    variant: String,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Input(_)
            | Error::Config { .. }
            | Error::Io(_)
            | Error::UnknownModel(_)
            | Error::Mixture(_)
            | Error::KernelOrder(_) => Failure::Usage(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let outcome = match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Coverage(a) => coverage(a),
        Command::Context(a) => context(a),
        Command::Verify => verify(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_data(path: &Path) -> std::result::Result<Vec<f64>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| Failure::Usage(format!("{} line {}: not a number: '{line}'", path.display(), i + 1)))?;
        if !v.is_finite() {
            return Err(Failure::Usage(format!("{} line {}: non-finite value", path.display(), i + 1)));
        }
        data.push(v);
    }
    if data.len() < 2 {
        return Err(Failure::Usage(format!("{}: need at least two observations", path.display())));
    }
    Ok(data)
}

fn estimate(a: EstimateArgs) -> CliResult {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::Usage(format!("alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let variant: IlVariant = a.variant.parse()?;
    let data = read_data(&a.data)?;
    let n = data.len();
    let mean = data.iter().sum::<f64>() / n as f64;
    let sd = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Failure::Numerical("sample has zero spread".into()));
    }
    // pilot bandwidth from a normal reference with the sample mean and sd
    let reference = MixtureDensity::new(vec![Component { weight: 1.0, mean, sd }])?;
    let setup = ExpansionSetup::standard(reference, 6, variant)?;
    let b = setup.b0(n)?;
    let plug = plugin_bandwidth(&data, &setup.constants, &setup.pilot, setup.l, b, variant, Execution::Parallel)?;
    let z = normal_quantile(1.0 - a.alpha / 2.0);
    println!("n={n} variant={variant} b={b:.7} il_hat={:.7} h_hat={:.7}", plug.il_hat, plug.h_hat);
    for x in a.x {
        let f_hat = kde(&data, &setup.kernel, plug.h_hat, x)?;
        let mu20 = variance_estimate(&data, &setup.kernel, plug.h_hat, x)?;
        let half = z * (mu20 / (n as f64 * plug.h_hat)).sqrt();
        println!(
            "x={x} f_hat={f_hat:.7} h_hat={:.7} ci_lower={:.7} ci_upper={:.7} level={}",
            plug.h_hat,
            f_hat - half,
            f_hat + half,
            1.0 - a.alpha
        );
    }
    Ok(())
}

fn coverage_config(a: &CoverageArgs) -> std::result::Result<SimConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            SimConfig::parse(&text)?
        }
        None => SimConfig::default(),
    };
    let lists = [("x", &a.x), ("n", &a.n)];
    for (key, values) in lists {
        if !values.is_empty() {
            cfg.set(key, &values.join(","))?;
        }
    }
    let singles = [
        ("model", &a.model),
        ("reps", &a.reps),
        ("alpha", &a.alpha),
        ("seed", &a.seed),
        ("variant", &a.variant),
        ("methods", &a.methods),
    ];
    for (key, value) in singles {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if a.sequential {
        cfg.exec = Execution::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn table_stem(model: &ModelChoice, x: f64) -> String {
    format!("coverage_model{}_x{}", model.label(), x)
}

fn coverage(a: CoverageArgs) -> CliResult {
    let cfg = coverage_config(&a)?;
    let table = run_coverage(&cfg)?;
    let formats: Vec<(TableFormat, &str)> = match a.format.as_deref() {
        Some("csv") => vec![(TableFormat::Csv, "csv")],
        Some(_) => vec![(TableFormat::Markdown, "md")],
        None if a.out.is_some() => vec![(TableFormat::Csv, "csv"), (TableFormat::Markdown, "md")],
        None => vec![(TableFormat::Csv, "csv")],
    };
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))?;
            for &x in &cfg.x_points {
                let part: CoverageTable = table.at_x(x);
                for (format, ext) in &formats {
                    let path = dir.join(format!("{}.{ext}", table_stem(&cfg.model, x)));
                    fs::write(&path, emit_table(&part, *format)?)
                        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                }
            }
        }
        None => {
            for (format, _) in &formats {
                print!("{}", emit_table(&table, *format)?);
            }
        }
    }
    if table.errors.is_empty() {
        return Ok(());
    }
    for e in &table.errors {
        let method = e.method.map(|m| m.to_string()).unwrap_or_else(|| "all".into());
        eprintln!("cell model={} x={} n={} method={method}: {}", cfg.model.label(), e.x, e.n, e.message);
    }
    Err(Failure::Numerical(format!("{} cell(s) failed", table.errors.len())))
}

fn context(a: ContextArgs) -> CliResult {
    let model: ModelChoice = a.model.parse()?;
    let variant: IlVariant = a.variant.parse()?;
    let setup = ExpansionSetup::standard(model.density()?, 6, variant)?;
    let ctx = build_context(&setup, a.x, a.n, BPolicy::MseOptimal).map_err(|e| {
        Failure::Numerical(format!("cell model={} x={} n={}: {e}", model.label(), a.x, a.n))
    })?;
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.7}")).unwrap_or_else(|| "-".into());
    println!("model={} x={} n={} variant={}", model.label(), ctx.x, ctx.n, ctx.variant);
    println!("h0={:.7}", ctx.h0);
    println!("b0={}", opt(ctx.b));
    println!("f_x={:.7}", ctx.f_x);
    println!("center={:.7}", ctx.center);
    println!("i_l={:.7}", ctx.i_l);
    for (name, v) in [
        ("mu20", ctx.mu20),
        ("mu30", ctx.mu30),
        ("mu40", ctx.mu40),
        ("mu11", ctx.mu11),
        ("mu21", ctx.mu21),
        ("mu02", ctx.mu02),
        ("xi11", ctx.xi11),
        ("rho11", ctx.rho11),
    ] {
        println!("{name}={v:.7}");
    }
    println!("omega111={}", opt(ctx.omega111));
    println!("psi111={}", opt(ctx.psi111));
    println!("delta={:.7}", ctx.delta);
    println!("c_pi={:.7}", ctx.c_pi);
    println!("script_l={:.7}", ctx.script_l);
    let gammas: Vec<String> = ctx.c_gamma.iter().map(|v| format!("{v:.7}")).collect();
    println!("c_gamma={}", gammas.join(","));
    Ok(())
}

fn check(ok: bool, name: &str, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
    ok
}

fn verify() -> CliResult {
    let mut all = true;
    let table = [
        (1, IlVariant::Ustat, [0.8448, 0.7908, 0.6930, 0.6351]),
        (1, IlVariant::Convo, [0.8596, 0.8047, 0.7052, 0.6462]),
        (2, IlVariant::Ustat, [0.5227, 0.4893, 0.4287, 0.3929]),
        (2, IlVariant::Convo, [0.5318, 0.4978, 0.4363, 0.3998]),
    ];
    for (model, variant, expected) in table {
        let s = ExpansionSetup::standard(marron_wand(model)?, 6, variant)?;
        let mut worst = 0.0f64;
        for (n, want) in [50, 100, 400, 1000].into_iter().zip(expected) {
            worst = worst.max((s.b0(n)? - want).abs());
        }
        all &= check(worst < 5e-4, &format!("b0 model {model} {variant}"), format!("max deviation {worst:.1e}"));
    }

    let q = QuadratureSpec::one_d();
    let cuts: Vec<f64> = (0..=48).map(|i| -24.0 + i as f64).collect();
    for order in [2usize, 4, 6, 8] {
        let k = hermite_order_kernel(order)?;
        let mass = integrate_pieces(|u| k.evaluate(u), &cuts, &q).map_err(Error::from)?;
        let mut low = (mass - 1.0).abs();
        for l in 1..order as i32 {
            low = low.max(integrate_pieces(|u| u.powi(l) * k.evaluate(u), &cuts, &q).map_err(Error::from)?.abs());
        }
        let top = integrate_pieces(|u| u.powi(order as i32) * k.evaluate(u), &cuts, &q).map_err(Error::from)?;
        all &= check(
            low < 1e-8 && top.abs() > 1e-3,
            &format!("kernel order {order}"),
            format!("max lower-moment error {low:.1e}, moment {order} = {top:.6}"),
        );
    }

    let s = ExpansionSetup::standard(marron_wand(1)?, 6, IlVariant::Ustat)?;
    for (x, n) in [(0.0, 100), (1.0, 1000)] {
        let ctx = build_context(&s, x, n, BPolicy::MseOptimal)?;
        let mut worst = 0.0f64;
        for kind in CdfKind::ALL {
            for alpha in [0.01, 0.025, 0.05, 0.5, 0.95, 0.975, 0.99] {
                let w = cornish_fisher_quantile(&ctx, kind, alpha)?;
                worst = worst.max((cdf_approx(&ctx, w, kind)? - alpha).abs());
            }
        }
        all &= check(worst <= 1e-8, &format!("quantile round trip x={x} n={n}"), format!("max error {worst:.1e}"));
    }
    if all {
        Ok(())
    } else {
        Err(Failure::Numerical("verification failed".into()))
    }
}
