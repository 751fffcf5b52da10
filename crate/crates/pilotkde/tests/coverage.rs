use approx::assert_abs_diff_eq;
use pilotkde::coverage::*;
use pilotkde::numerics::RngStream;
use pilotkde::{marron_wand, Component, Error, Execution, IlVariant};

fn small_config(x: &[f64], n: &[usize], reps: usize) -> SimConfig {
    SimConfig { x_points: x.to_vec(), n_values: n.to_vec(), replications: reps, seed: 31, ..SimConfig::default() }
}

fn normal_q() -> Quantiles {
    Quantiles { lower: -1.959963984540054, upper: 1.959963984540054 }
}

#[test]
fn normal_half_width() {
    let (f_hat, h, n, mu20) = (0.3, 0.25, 400, 0.09);
    let iv = make_intervals(f_hat, h, n, mu20, &[(Method::Normal, normal_q())]).unwrap();
    let s = (mu20 / (n as f64 * h)).sqrt();
    assert_abs_diff_eq!(iv[0].1.hi - f_hat, 1.959964 * s, epsilon = 1e-7);
    assert_abs_diff_eq!(f_hat - iv[0].1.lo, 1.959964 * s, epsilon = 1e-7);
}

#[test]
fn degenerate_and_invalid_quantiles() {
    let q = Quantiles { lower: 0.7, upper: 0.7 };
    let iv = make_intervals(0.3, 0.25, 400, 0.09, &[(Method::Hall, q)]).unwrap();
    assert_eq!(iv[0].1.length(), 0.0);
    let inf = Quantiles { lower: f64::NEG_INFINITY, upper: f64::INFINITY };
    assert!(matches!(make_intervals(0.3, 0.25, 400, 0.09, &[(Method::Main, inf)]), Err(Error::NonFinite(_))));
    assert!(make_intervals(0.3, 0.0, 400, 0.09, &[(Method::Normal, normal_q())]).is_err());
    assert!(make_intervals(0.3, 0.2, 400, -1.0, &[(Method::Normal, normal_q())]).is_err());
}

#[test]
fn intervals_at_center_cover() {
    let cfg = SimConfig::default();
    let setup = cfg.setup().unwrap();
    let (plan, failed) = CellPlan::new(&setup, 1.0, 400, 0.05, &Method::ALL).unwrap();
    assert!(failed.is_empty());
    let c = plan.ctx.center;
    for (m, iv) in make_intervals(c, plan.ctx.h0, 400, plan.ctx.mu20, &plan.quantiles).unwrap() {
        assert!(iv.contains(c), "{m}");
        assert!(iv.lo < iv.hi);
    }
}

#[test]
fn replication_is_reproducible() {
    let cfg = SimConfig::default();
    let setup = cfg.setup().unwrap();
    let (plan, _) = CellPlan::new(&setup, 0.0, 200, 0.05, &Method::ALL).unwrap();
    let a = run_replication(&setup, &plan, RngStream::new(4, 17)).unwrap();
    let b = run_replication(&setup, &plan, RngStream::new(4, 17)).unwrap();
    assert_eq!(a, b);
    let data = pilotkde::sample(&setup.model, 200, RngStream::new(4, 17));
    assert_eq!(replicate_on(&setup, &data, &plan).unwrap(), a);
    assert_eq!(a.covered.len(), 4);
    assert!(a.lengths.iter().all(|(_, l)| *l > 0.0 && l.is_finite()));
}

#[test]
fn pathwise_nesting() {
    let cfg = SimConfig::default();
    let setup = cfg.setup().unwrap();
    let (plan, _) = CellPlan::new(&setup, 0.5, 100, 0.05, &[Method::Normal]).unwrap();
    let (wide, _) = CellPlan::new(&setup, 0.5, 100, 0.01, &[Method::Normal]).unwrap();
    for r in 0..300 {
        let a = run_replication(&setup, &plan, RngStream::new(8, r)).unwrap();
        let b = run_replication(&setup, &wide, RngStream::new(8, r)).unwrap();
        assert!(b.lengths[0].1 > a.lengths[0].1);
        assert!(!a.covered[0].1 || b.covered[0].1);
    }
}

#[test]
fn alpha_monotone_coverage() {
    let mut narrow = small_config(&[0.0, 1.0], &[100], 400);
    narrow.methods = vec![Method::Normal];
    let mut wide = narrow.clone();
    wide.alpha = 0.01;
    let (a, b) = (run_coverage(&narrow).unwrap(), run_coverage(&wide).unwrap());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert!(rb.coverage >= ra.coverage);
    }
}

fn csv_with_threads(cfg: &SimConfig, threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| emit_table(&run_coverage(cfg).unwrap(), TableFormat::Csv).unwrap())
}

#[test]
fn thread_count_does_not_change_output() {
    let cfg = small_config(&[-0.5, 1.0], &[60, 150], 120);
    let one = csv_with_threads(&cfg, 1);
    assert_eq!(one, csv_with_threads(&cfg, 4));
    assert_eq!(one, csv_with_threads(&cfg, 8));
    let seq = SimConfig { exec: Execution::Sequential, ..cfg.clone() };
    assert_eq!(one, emit_table(&run_coverage(&seq).unwrap(), TableFormat::Csv).unwrap());
    let other_seed = SimConfig { seed: 32, ..cfg };
    assert_ne!(one, csv_with_threads(&other_seed, 4));
}

#[test]
fn table_invariants() {
    let table = run_coverage(&small_config(&[1.0], &[100], 2000)).unwrap();
    assert!(table.errors.is_empty());
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert!((0.0..=1.0).contains(&r.coverage));
        assert!(r.avg_length > 0.0);
        assert!(r.mc_std_err <= 0.0112);
        assert_abs_diff_eq!(r.mc_std_err, (r.coverage * (1.0 - r.coverage) / 2000.0).sqrt(), epsilon = 1e-15);
    }
    assert_eq!(table.contexts.len(), 1);
    assert!(table.row(100, 1.0, Method::Pilot).is_some());
}

#[test]
fn lengths_shrink_with_n() {
    let table = run_coverage(&small_config(&[0.0, 1.0], &[50, 1000], 200)).unwrap();
    for x in [0.0, 1.0] {
        for m in Method::ALL {
            let small = table.row(50, x, m).unwrap().avg_length;
            let large = table.row(1000, x, m).unwrap().avg_length;
            assert!(large < small, "x={x} {m}");
        }
    }
}

#[test]
fn rows_are_sorted() {
    let table = run_coverage(&small_config(&[1.0, -1.0], &[120, 60], 20)).unwrap();
    let keys: Vec<(f64, usize, Method)> = table.rows.iter().map(|r| (r.x, r.n, r.method)).collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    assert_eq!(keys, sorted);
    assert_eq!(table.at_x(1.0).rows.len(), 8);
}

#[test]
fn csv_round_trip() {
    let table = run_coverage(&small_config(&[0.25], &[80], 50)).unwrap();
    let text = emit_table(&table, TableFormat::Csv).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
    for (rec, row) in rdr.records().zip(&table.rows) {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], "1");
        assert_eq!(rec[1].parse::<f64>().unwrap(), row.x);
        assert_eq!(rec[2].parse::<usize>().unwrap(), row.n);
        assert_eq!(rec[3].parse::<Method>().unwrap(), row.method);
        assert_eq!(rec[4].parse::<f64>().unwrap(), row.coverage);
        assert_eq!(rec[5].parse::<f64>().unwrap(), row.avg_length);
        assert_eq!(rec[6].parse::<f64>().unwrap(), row.mc_std_err);
        assert_eq!(rec[7].parse::<f64>().unwrap(), row.h0);
        assert_eq!(rec[8].parse::<f64>().unwrap(), row.b0);
        assert_eq!(rec[9].parse::<f64>().unwrap(), row.center);
        assert_eq!(rec[10].parse::<f64>().unwrap(), row.mu20);
    }
}

#[test]
fn empty_table_is_header_only() {
    let table = CoverageTable { config: SimConfig::default(), rows: vec![], errors: vec![], contexts: vec![] };
    assert_eq!(emit_table(&table, TableFormat::Csv).unwrap(), CSV_COLUMNS.join(",") + "\n");
    let md = emit_table(&table, TableFormat::Markdown).unwrap();
    assert_eq!(md.lines().count(), 2);
}

#[test]
fn markdown_layout() {
    let table = run_coverage(&small_config(&[1.0], &[50, 100, 400, 1000], 30)).unwrap();
    let md = emit_table(&table, TableFormat::Markdown).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines[0], "model 1, x = 1");
    let header = lines[2];
    assert_eq!(header.matches(" CP |").count(), 4);
    assert_eq!(header.matches("Ave.Length").count(), 4);
    let body: Vec<&str> = lines[4..].to_vec();
    assert_eq!(body.len(), 4);
    for (line, m) in body.iter().zip(Method::ALL) {
        assert!(line.starts_with(&format!("| {m} |")));
        assert_eq!(line.matches('|').count(), 1 + 1 + 8);
    }
    // one best and one runner-up per n column
    assert_eq!(md.matches("**").count(), 2 * 4);
    let single = md.replace("**", "");
    assert_eq!(single.matches('*').count(), 2 * 4);
}

#[test]
fn config_parsing() {
    let text = "# run\nmodel = 2\nx = -2, 1\nn = 400,1000\nreps = 50\nalpha = 0.1\nvariant = convo\nseed = 9 # trailing\nmethods = normal, main\n";
    let cfg = SimConfig::parse(text).unwrap();
    assert_eq!(cfg.model, ModelChoice::MarronWand(2));
    assert_eq!(cfg.x_points, vec![-2.0, 1.0]);
    assert_eq!(cfg.n_values, vec![400, 1000]);
    assert_eq!(cfg.replications, 50);
    assert_eq!(cfg.alpha, 0.1);
    assert_eq!(cfg.variant, IlVariant::Convo);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.methods, vec![Method::Normal, Method::Main]);
    assert_eq!((cfg.l, cfg.lp), (2, 6));

    assert!(matches!(SimConfig::parse("model = 1\nbogus"), Err(Error::Config { line: 2, .. })));
    assert!(matches!(SimConfig::parse("colour = red"), Err(Error::Config { line: 1, .. })));
    assert!(SimConfig::parse("reps = 0").is_err());
    assert!(SimConfig::parse("alpha = 1.5").is_err());
    assert!(SimConfig::parse("n = 1").is_err());
    assert!(SimConfig::parse("methods = normal, other").is_err());
    assert!(SimConfig::parse("model = 7").is_err());
}

#[test]
fn inline_mixture() {
    let m: ModelChoice = "0.5:-1:0.5, 0.5:1:0.5".parse().unwrap();
    let d = m.density().unwrap();
    assert_eq!(d.components().len(), 2);
    assert_eq!(d.components()[1], Component { weight: 0.5, mean: 1.0, sd: 0.5 });
    assert_eq!(m.label(), "custom");
    assert!("0.5:0:1".parse::<ModelChoice>().is_err());
    assert!("1:0".parse::<ModelChoice>().is_err());
    let cfg = SimConfig { model: m, ..small_config(&[0.0], &[80], 10) };
    let t = run_coverage(&cfg).unwrap();
    assert_eq!(t.rows[0].model, "custom");
    assert_eq!(marron_wand(1).unwrap().components().len(), 1);
}

#[test]
fn methods_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
    assert_eq!(Method::Hall.kind().to_string(), "hall2");
    assert_eq!(Method::Pilot.kind().to_string(), "pilot2");
    assert_eq!("md".parse::<TableFormat>().unwrap(), TableFormat::Markdown);
}
