//! Monte Carlo coverage study: sampling, plug-in bandwidth, confidence
//! intervals from each approximation, and table output.

use std::fmt;
use std::str::FromStr;

use crate::bandwidth::{plugin_bandwidth, IlVariant};
use crate::density::{marron_wand, sample, Component, MixtureDensity};
use crate::edgeworth::{build_context, cornish_fisher_quantile, BPolicy, CdfKind, ExpansionContext, ExpansionSetup};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::kde::kde;
use crate::kernel::hermite_order_kernel;
use crate::numerics::{pairwise_sum, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Normal,
    Hall,
    Main,
    Pilot,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Normal, Method::Hall, Method::Main, Method::Pilot];

    pub fn kind(self) -> CdfKind {
        match self {
            Method::Normal => CdfKind::Normal,
            Method::Hall => CdfKind::Hall2,
            Method::Main => CdfKind::Main,
            Method::Pilot => CdfKind::Pilot2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Normal => "normal",
            Method::Hall => "hall",
            Method::Main => "main",
            Method::Pilot => "pilot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Input(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelChoice {
    MarronWand(u32),
    Inline(Vec<Component>),
}

impl ModelChoice {
    pub fn density(&self) -> Result<MixtureDensity> {
        match self {
            ModelChoice::MarronWand(id) => marron_wand(*id),
            ModelChoice::Inline(c) => MixtureDensity::new(c.clone()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelChoice::MarronWand(id) => id.to_string(),
            ModelChoice::Inline(_) => "custom".to_string(),
        }
    }
}

impl FromStr for ModelChoice {
    type Err = Error;
    /// Either a model id or `weight:mean:sd` triples separated by commas.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(id) = s.parse::<u32>() {
            marron_wand(id)?;
            return Ok(ModelChoice::MarronWand(id));
        }
        let comps = s
            .split(',')
            .map(|triple| {
                let v: Vec<f64> = triple
                    .split(':')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Input(format!("bad mixture component '{triple}'")))?;
                match v[..] {
                    [weight, mean, sd] => Ok(Component { weight, mean, sd }),
                    _ => Err(Error::Input(format!("mixture component '{triple}' needs weight:mean:sd"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureDensity::new(comps.clone())?;
        Ok(ModelChoice::Inline(comps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub model: ModelChoice,
    pub x_points: Vec<f64>,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub alpha: f64,
    pub l: usize,
    pub lp: usize,
    pub variant: IlVariant,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub exec: Execution,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice::MarronWand(1),
            x_points: vec![0.0],
            n_values: vec![50, 100, 400, 1000],
            replications: 2000,
            alpha: 0.05,
            l: 2,
            lp: 6,
            variant: IlVariant::Ustat,
            seed: 20_240_101,
            methods: Method::ALL.to_vec(),
            exec: Execution::default(),
        }
    }
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(T::from_str).collect()
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Input("replications must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Input(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.x_points.is_empty() || self.n_values.is_empty() || self.methods.is_empty() {
            return Err(Error::Input("x, n and methods must be non-empty".into()));
        }
        if let Some(n) = self.n_values.iter().find(|&&n| n < 2) {
            return Err(Error::Input(format!("sample sizes must be at least 2, got {n}")));
        }
        if self.x_points.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("evaluation points must be finite".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Input(format!("invalid {what} '{value}'"));
        match key {
            "model" => self.model = value.parse()?,
            "x" => self.x_points = parse_list(value).map_err(|_| bad("x list"))?,
            "n" => self.n_values = parse_list(value).map_err(|_| bad("n list"))?,
            "reps" | "replications" => self.replications = value.parse().map_err(|_| bad("replication count"))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "L" | "l" => self.l = value.parse().map_err(|_| bad("kernel order"))?,
            "Lp" | "lp" => self.lp = value.parse().map_err(|_| bad("pilot order"))?,
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "methods" => self.methods = parse_list(value)?,
            other => return Err(Error::Input(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Flat `key = value` text with `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: i + 1, message: "expected key = value".into() })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config { line: i + 1, message: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn setup(&self) -> Result<ExpansionSetup> {
        let kernel = hermite_order_kernel(self.l)?;
        let pilot = hermite_order_kernel(self.lp)?;
        ExpansionSetup::new(self.model.density()?, kernel, pilot, self.l, self.lp, self.variant)
    }
}

/// Lower and upper Cornish–Fisher quantiles, w_{α/2} and w_{1−α/2}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub lower: f64,
    pub upper: f64,
}

impl Quantiles {
    pub fn from_context(ctx: &ExpansionContext, kind: CdfKind, alpha: f64) -> Result<Self> {
        Ok(Self {
            lower: cornish_fisher_quantile(ctx, kind, alpha / 2.0)?,
            upper: cornish_fisher_quantile(ctx, kind, 1.0 - alpha / 2.0)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// [f̂ − w_{1−α/2} s, f̂ − w_{α/2} s] with s = √(μ₂₀ / (n ĥ)), ordered so lo ≤ hi.
pub fn make_intervals(
    f_hat: f64,
    h_hat: f64,
    n: usize,
    mu20: f64,
    quantiles: &[(Method, Quantiles)],
) -> Result<Vec<(Method, Interval)>> {
    if !(h_hat > 0.0) || !(mu20 > 0.0) || n == 0 {
        return Err(Error::Input("interval needs positive h, mu20 and n".into()));
    }
    let s = (mu20 / (n as f64 * h_hat)).sqrt();
    quantiles
        .iter()
        .map(|&(m, q)| {
            if !q.lower.is_finite() || !q.upper.is_finite() {
                return Err(Error::NonFinite("interval quantiles"));
            }
            let a = f_hat - q.upper * s;
            let b = f_hat - q.lower * s;
            Ok((m, Interval { lo: a.min(b), hi: a.max(b) }))
        })
        .collect()
}

/// Everything fixed for one (n, x) cell across replications.
#[derive(Debug, Clone)]
pub struct CellPlan {
    pub n: usize,
    pub x: f64,
    pub b: f64,
    pub ctx: ExpansionContext,
    pub quantiles: Vec<(Method, Quantiles)>,
}

impl CellPlan {
    pub fn new(setup: &ExpansionSetup, x: f64, n: usize, alpha: f64, methods: &[Method]) -> Result<(Self, Vec<(Method, Error)>)> {
        let ctx = build_context(setup, x, n, BPolicy::MseOptimal)?;
        let mut quantiles = Vec::new();
        let mut failed = Vec::new();
        for &m in methods {
            match Quantiles::from_context(&ctx, m.kind(), alpha) {
                Ok(q) => quantiles.push((m, q)),
                Err(e) => failed.push((m, e)),
            }
        }
        let b = ctx.b.unwrap_or(f64::NAN);
        Ok((Self { n, x, b, ctx, quantiles }, failed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub h_hat: f64,
    pub f_hat: f64,
    pub covered: Vec<(Method, bool)>,
    pub lengths: Vec<(Method, f64)>,
}

fn evaluate_plan(setup: &ExpansionSetup, data: &[f64], h_hat: f64, plan: &CellPlan) -> Result<ReplicationOutcome> {
    let f_hat = kde(data, &setup.kernel, h_hat, plan.x)?;
    let intervals = make_intervals(f_hat, h_hat, data.len(), plan.ctx.mu20, &plan.quantiles)?;
    let mut covered = Vec::with_capacity(intervals.len());
    let mut lengths = Vec::with_capacity(intervals.len());
    for (m, iv) in intervals {
        if !iv.length().is_finite() {
            return Err(Error::NonFinite("interval length"));
        }
        covered.push((m, iv.contains(plan.ctx.center)));
        lengths.push((m, iv.length()));
    }
    Ok(ReplicationOutcome { h_hat, f_hat, covered, lengths })
}

/// One replication at a single cell: sample, plug-in bandwidth, intervals.
pub fn run_replication(setup: &ExpansionSetup, plan: &CellPlan, stream: RngStream) -> Result<ReplicationOutcome> {
    let data = sample(&setup.model, plan.n, stream);
    replicate_on(setup, &data, plan)
}

/// Same as [`run_replication`] on a given sample.
pub fn replicate_on(setup: &ExpansionSetup, data: &[f64], plan: &CellPlan) -> Result<ReplicationOutcome> {
    let plug = plugin_bandwidth(data, &setup.constants, &setup.pilot, setup.l, plan.b, setup.variant, Execution::Sequential)?;
    evaluate_plan(setup, data, plug.h_hat, plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub model: String,
    pub x: f64,
    pub n: usize,
    pub method: Method,
    pub coverage: f64,
    pub avg_length: f64,
    pub mc_std_err: f64,
    pub h0: f64,
    pub b0: f64,
    pub center: f64,
    pub mu20: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellError {
    pub n: usize,
    pub x: f64,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextEcho {
    pub n: usize,
    pub x: f64,
    pub h0: f64,
    pub b0: f64,
    pub center: f64,
    pub mu20: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageTable {
    pub config: SimConfig,
    pub rows: Vec<CoverageRow>,
    pub errors: Vec<CellError>,
    pub contexts: Vec<ContextEcho>,
}

impl CoverageTable {
    /// Rows at one evaluation point.
    pub fn at_x(&self, x: f64) -> CoverageTable {
        CoverageTable {
            config: SimConfig { x_points: vec![x], ..self.config.clone() },
            rows: self.rows.iter().filter(|r| r.x == x).cloned().collect(),
            errors: self.errors.iter().filter(|e| e.x == x).cloned().collect(),
            contexts: self.contexts.iter().filter(|c| c.x == x).cloned().collect(),
        }
    }

    pub fn row(&self, n: usize, x: f64, method: Method) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.n == n && r.x == x && r.method == method)
    }
}

pub fn run_coverage(cfg: &SimConfig) -> Result<CoverageTable> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    let mut table = CoverageTable { config: cfg.clone(), rows: Vec::new(), errors: Vec::new(), contexts: Vec::new() };
    let label = cfg.model.label();
    for &n in &cfg.n_values {
        let mut plans = Vec::new();
        for &x in &cfg.x_points {
            match CellPlan::new(&setup, x, n, cfg.alpha, &cfg.methods) {
                Ok((plan, failed)) => {
                    for (m, e) in failed {
                        table.errors.push(CellError { n, x, method: Some(m), message: e.to_string() });
                    }
                    table.contexts.push(ContextEcho {
                        n,
                        x,
                        h0: plan.ctx.h0,
                        b0: plan.b,
                        center: plan.ctx.center,
                        mu20: plan.ctx.mu20,
                    });
                    plans.push(plan);
                }
                Err(e) => table.errors.push(CellError { n, x, method: None, message: e.to_string() }),
            }
        }
        if plans.is_empty() {
            continue;
        }
        let b = plans[0].b;
        let outcomes: Vec<Result<Vec<ReplicationOutcome>>> = map_indexed(cfg.exec, cfg.replications, |r| {
            let data = sample(&setup.model, n, RngStream::new(cfg.seed, r as u64));
            let plug =
                plugin_bandwidth(&data, &setup.constants, &setup.pilot, setup.l, b, setup.variant, Execution::Sequential)?;
            plans.iter().map(|p| evaluate_plan(&setup, &data, plug.h_hat, p)).collect()
        });
        let reps = cfg.replications as f64;
        let first_failure = outcomes.iter().position(|o| o.is_err());
        if let Some(r) = first_failure {
            let msg = match &outcomes[r] {
                Err(e) => format!("replication {r}: {e}"),
                Ok(_) => unreachable!(),
            };
            for p in &plans {
                table.errors.push(CellError { n, x: p.x, method: None, message: msg.clone() });
            }
            continue;
        }
        let outcomes: Vec<Vec<ReplicationOutcome>> = outcomes.into_iter().map(|o| o.unwrap_or_default()).collect();
        for (pi, plan) in plans.iter().enumerate() {
            for (mi, &(method, _)) in plan.quantiles.iter().enumerate() {
                let hits = outcomes.iter().filter(|o| o[pi].covered[mi].1).count();
                let lengths: Vec<f64> = outcomes.iter().map(|o| o[pi].lengths[mi].1).collect();
                let p = hits as f64 / reps;
                table.rows.push(CoverageRow {
                    model: label.clone(),
                    x: plan.x,
                    n,
                    method,
                    coverage: p,
                    avg_length: pairwise_sum(&lengths) / reps,
                    mc_std_err: (p * (1.0 - p) / reps).sqrt(),
                    h0: plan.ctx.h0,
                    b0: plan.b,
                    center: plan.ctx.center,
                    mu20: plan.ctx.mu20,
                });
            }
        }
    }
    table.rows.sort_by(|a, b| {
        a.x.total_cmp(&b.x).then(a.n.cmp(&b.n)).then(a.method.cmp(&b.method))
    });
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::Input(format!("unknown format '{other}'"))),
        }
    }
}

pub const CSV_COLUMNS: [&str; 11] =
    ["model", "x", "n", "method", "coverage", "avg_length", "mc_std_err", "h0", "b0", "center", "mu20"];

pub fn emit_table(table: &CoverageTable, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Csv => emit_csv(table),
        TableFormat::Markdown => Ok(emit_markdown(table)),
    }
}

fn emit_csv(table: &CoverageTable) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in &table.rows {
        w.write_record([
            r.model.clone(),
            format!("{:?}", r.x),
            r.n.to_string(),
            r.method.to_string(),
            format!("{:?}", r.coverage),
            format!("{:?}", r.avg_length),
            format!("{:?}", r.mc_std_err),
            format!("{:?}", r.h0),
            format!("{:?}", r.b0),
            format!("{:?}", r.center),
            format!("{:?}", r.mu20),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn emit_markdown(table: &CoverageTable) -> String {
    let mut out = String::new();
    if table.rows.is_empty() {
        out.push_str("| Method | CP | Ave.Length |\n|---|---|---|\n");
        return out;
    }
    let target = 1.0 - table.config.alpha;
    let mut xs: Vec<f64> = table.rows.iter().map(|r| r.x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let rows: Vec<&CoverageRow> = table.rows.iter().filter(|r| r.x == x).collect();
        let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
        ns.sort_unstable();
        ns.dedup();
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        out.push_str(&format!("model {}, x = {}\n\n", rows[0].model, x));
        out.push_str("| Method |");
        for n in &ns {
            out.push_str(&format!(" n={n} CP | n={n} Ave.Length |"));
        }
        out.push_str("\n|---|");
        for _ in &ns {
            out.push_str("---|---|");
        }
        out.push('\n');
        // rank methods within each n column by distance to the nominal level
        let ranks: Vec<Vec<(Method, usize)>> = ns
            .iter()
            .map(|&n| {
                let mut col: Vec<(Method, f64)> = rows
                    .iter()
                    .filter(|r| r.n == n)
                    .map(|r| (r.method, (r.coverage - target).abs()))
                    .collect();
                col.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                col.iter().enumerate().map(|(k, (m, _))| (*m, k)).collect()
            })
            .collect();
        for m in &methods {
            out.push_str(&format!("| {m} |"));
            for (j, &n) in ns.iter().enumerate() {
                match rows.iter().find(|r| r.n == n && r.method == *m) {
                    Some(r) => {
                        let rank = ranks[j].iter().find(|(mm, _)| mm == m).map(|(_, k)| *k);
                        let cp = format!("{:.4}", r.coverage);
                        let cp = match rank {
                            Some(0) => format!("**{cp}**"),
                            Some(1) => format!("*{cp}*"),
                            _ => cp,
                        };
                        out.push_str(&format!(" {cp} | {:.4} |", r.avg_length));
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
    }
    out
}
