//! Command-line front end: argument parsing, file layout and exit codes.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::experiments::{
    mean, run_ablation, run_observation, run_sweep, train_all, ExperimentConfig, HEADLINE_K, PCPL_LABEL,
};
use crate::metrics::{Protocol, K_VALUES};
use crate::svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "corrbalance", version, about = "Correlation-aware predicate re-weighting experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one JSON Lines dataset per seed.
    Generate(CommonArgs),
    /// Train every configured loss variant for every seed.
    Train(CommonArgs),
    /// Re-weighting exponent sweep with the PCPL reference.
    Sweep(CommonArgs),
    /// Two-group re-weighting versus cross-entropy deltas.
    Observe(CommonArgs),
    /// Center-mode by normalization grid for PCPL.
    Ablate(CommonArgs),
    /// Consolidate the tables in a run directory into markdown and plots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated seeds overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Both)]
    pub protocol: ProtocolArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory holding the command outputs.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Constrained,
    Unconstrained,
    Both,
}

impl ProtocolArg {
    pub fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::Constrained => vec![Protocol::Constrained],
            ProtocolArg::Unconstrained => vec![Protocol::Unconstrained],
            ProtocolArg::Both => Protocol::ALL.to_vec(),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// `Ok(false)` when some runs failed but outputs were still written.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Observe(a) => cmd_observe(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a.out),
    }
}

fn load(args: &CommonArgs) -> Result<(ExperimentConfig, Vec<u64>)> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let seeds = match &args.seeds {
        Some(s) if s.is_empty() => return Err(Error::config("--seeds", "need at least one seed")),
        Some(s) => s.clone(),
        None => cfg.seeds.clone(),
    };
    Ok((cfg, seeds))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

fn join_values(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

pub fn cmd_generate(args: &CommonArgs) -> Result<bool> {
    let (cfg, seeds) = load(args)?;
    for seed in seeds {
        let ds = cfg.dataset(seed)?;
        let path = args.out.join(format!("dataset_seed{seed}.jsonl"));
        write(&path, &ds.to_jsonl()?)?;
        println!(
            "{}: {} scenes, {} relations, class counts {:?}",
            path.display(),
            ds.scenes.len(),
            ds.num_pairs(),
            ds.class_counts()
        );
    }
    Ok(true)
}

pub fn cmd_train(args: &CommonArgs) -> Result<bool> {
    let (cfg, seeds) = load(args)?;
    let hash = cfg.hash();
    let protocols = args.protocol.protocols();
    let mut summary = Vec::new();
    let mut classes = Vec::new();
    let mut all_ok = true;
    for (label, seed, outcome) in train_all(&cfg, &seeds)? {
        let dir = args.out.join("runs").join(format!("{label}_seed{seed}"));
        match outcome {
            Ok((model, result)) => {
                write(&dir.join("checkpoint.json"), &model.to_json()?)?;
                write(&dir.join("log.csv"), &model.log_csv(&hash)?)?;
                for &p in &protocols {
                    let report = result.report(p);
                    write(&dir.join(format!("eval_{}.csv", p.name())), &report.to_csv()?)?;
                    let mut row = vec![hash.clone(), label.clone(), seed.to_string(), "ok".into(), p.name().into()];
                    row.extend(K_VALUES.iter().map(|&k| opt(report.mean_recall_at(k))));
                    row.push(opt(report.recall_at(HEADLINE_K)));
                    row.push(opt(result.drop_precision));
                    summary.push(row);
                    for (c, &gt) in report.gt_counts.iter().enumerate() {
                        classes.push(vec![
                            hash.clone(),
                            label.clone(),
                            seed.to_string(),
                            p.name().into(),
                            c.to_string(),
                            gt.to_string(),
                            opt(report.class_recall_at(HEADLINE_K, c)),
                        ]);
                    }
                    println!(
                        "{label} seed {seed} {}: mR@100 {:.4}",
                        p.name(),
                        report.mean_recall_at(HEADLINE_K).unwrap_or(f64::NAN)
                    );
                }
            }
            Err(e) => {
                all_ok = false;
                eprintln!("{label} seed {seed}: {e}");
                let mut row = vec![hash.clone(), label.clone(), seed.to_string(), format!("failed: {e}"), String::new()];
                row.extend(std::iter::repeat_n(String::new(), K_VALUES.len() + 2));
                summary.push(row);
            }
        }
    }
    let mut header = vec!["config_hash", "variant", "seed", "status", "protocol"];
    let k_cols: Vec<String> = K_VALUES.iter().map(|k| format!("mR@{k}")).collect();
    header.extend(k_cols.iter().map(String::as_str));
    header.extend(["R@100", "drop_precision"]);
    write(&args.out.join("train_summary.csv"), &csv_string(&header, &summary)?)?;
    write(
        &args.out.join("train_classes.csv"),
        &csv_string(
            &["config_hash", "variant", "seed", "protocol", "class", "gt_count", "recall@100"],
            &classes,
        )?,
    )?;
    Ok(all_ok)
}

pub fn cmd_sweep(args: &CommonArgs) -> Result<bool> {
    let (cfg, seeds) = load(args)?;
    let table = run_sweep(&cfg, &seeds)?;
    let mut header: Vec<String> = ["config_hash", "seed", "label", "n"].map(String::from).to_vec();
    header.extend((0..table.num_classes).map(|c| format!("recall@100_c{c}")));
    header.push("mR@100".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![table.config_hash.clone(), r.seed.to_string(), r.label.clone(), opt(r.n)];
            row.extend(r.class_recall.iter().map(|&v| num(v)));
            row.push(num(r.mean_recall));
            row
        })
        .collect();
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    write(&args.out.join("sweep.csv"), &csv_string(&header_ref, &rows)?)?;

    let mut labels: Vec<(String, Option<f64>)> = Vec::new();
    for r in &table.rows {
        if !labels.iter().any(|(l, _)| l == &r.label) {
            labels.push((r.label.clone(), r.n));
        }
    }
    let summary: Vec<Vec<String>> = labels
        .iter()
        .map(|(label, n)| {
            let v: Vec<f64> = table.rows.iter().filter(|r| &r.label == label).map(|r| r.mean_recall).collect();
            let (lo, hi) = min_max(&v);
            vec![
                table.config_hash.clone(),
                join_seeds(&seeds),
                label.clone(),
                opt(*n),
                num(mean(&v)),
                num(lo),
                num(hi),
            ]
        })
        .collect();
    let summary_csv = csv_string(
        &["config_hash", "seeds", "label", "n", "mean_mR@100", "min_mR@100", "max_mR@100"],
        &summary,
    )?;
    write(&args.out.join("sweep_summary.csv"), &summary_csv)?;
    write(&args.out.join("sweep.svg"), &sweep_svg(&read_csv_str(&summary_csv)?))?;

    for s in &seeds {
        let best = table
            .sweep_rows(*s)
            .map(|r| r.mean_recall)
            .fold(f64::NEG_INFINITY, f64::max);
        let pcpl = table.row(*s, PCPL_LABEL).map(|r| r.mean_recall);
        println!("seed {s}: sweep max mR@100 {best:.4}, pcpl {}", pcpl.map_or("-".into(), |v| format!("{v:.4}")));
    }
    Ok(true)
}

pub fn cmd_observe(args: &CommonArgs) -> Result<bool> {
    let (cfg, seeds) = load(args)?;
    let table = run_observation(&cfg, &seeds)?;
    let protocols = args.protocol.protocols();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .filter(|r| protocols.contains(&r.protocol))
        .map(|r| {
            let (lo, hi) = min_max(&r.deltas);
            vec![
                table.config_hash.clone(),
                join_seeds(&table.seeds),
                r.group.clone(),
                r.class.clone(),
                r.protocol.name().into(),
                num(r.mean_delta()),
                num(lo),
                num(hi),
                join_values(&r.deltas),
            ]
        })
        .collect();
    let text = csv_string(
        &["config_hash", "seeds", "group", "class", "protocol", "mean_delta", "min_delta", "max_delta", "deltas"],
        &rows,
    )?;
    write(&args.out.join("observe.csv"), &text)?;
    write(&args.out.join("observe.svg"), &observe_svg(&read_csv_str(&text)?))?;
    for r in &rows {
        println!("{} {} {}: {} points (min {}, max {})", r[2], r[3], r[4], r[5], r[6], r[7]);
    }
    Ok(true)
}

pub fn cmd_ablate(args: &CommonArgs) -> Result<bool> {
    let (cfg, seeds) = load(args)?;
    let table = run_ablation(&cfg, &seeds)?;
    let protocols = args.protocol.protocols();
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .filter(|r| protocols.contains(&r.protocol))
        .map(|r| {
            let (lo, hi) = min_max(&r.mr100);
            vec![
                table.config_hash.clone(),
                join_seeds(&table.seeds),
                r.center_mode.name().into(),
                r.normalization.name().into(),
                r.protocol.name().into(),
                num(mean(&r.mr50)),
                num(mean(&r.mr100)),
                num(lo),
                num(hi),
                join_values(&r.mr100),
            ]
        })
        .collect();
    write(
        &args.out.join("ablate.csv"),
        &csv_string(
            &[
                "config_hash",
                "seeds",
                "center_mode",
                "normalization",
                "protocol",
                "mean_mR@50",
                "mean_mR@100",
                "min_mR@100",
                "max_mR@100",
                "mR@100",
            ],
            &rows,
        )?,
    )?;
    for &p in &protocols {
        println!("{} ordering by mean mR@100:", p.name());
        for (c, n, v) in table.ordering(p) {
            println!("  {} + {}: {v:.4}", c.name(), n.name());
        }
    }
    Ok(true)
}

type Table = Vec<HashMap<String, String>>;

fn read_csv_str(text: &str) -> Result<Table> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn read_csv(path: &Path) -> Result<Option<Table>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_csv_str(&text).map(Some)
}

fn field<'a>(row: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    row.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Input(format!("missing column `{key}`")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Input(format!("`{s}` is not a number")))
}

fn sweep_svg(summary: &Table) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut refs = Vec::new();
    for r in summary {
        let (Some(label), Some(v)) = (r.get("label"), r.get("mean_mR@100").and_then(|v| v.parse().ok())) else {
            continue;
        };
        match r.get("n").and_then(|n| n.parse::<f64>().ok()) {
            Some(n) => {
                xs.push(n);
                ys.push(v);
            }
            None => refs.push((label.clone(), v)),
        }
    }
    svg::line_chart(
        "mR@100 versus re-weighting exponent",
        "n",
        "mean mR@100",
        &xs,
        &[("re-weighting".into(), ys)],
        &refs,
    )
}

fn observe_svg(table: &Table) -> String {
    let mut categories: Vec<String> = Vec::new();
    let mut by_protocol: BTreeMap<String, HashMap<String, f64>> = BTreeMap::new();
    for r in table {
        let (Some(g), Some(c), Some(p), Some(v)) = (
            r.get("group"),
            r.get("class"),
            r.get("protocol"),
            r.get("mean_delta").and_then(|v| v.parse::<f64>().ok()),
        ) else {
            continue;
        };
        let cat = format!("{g}/{c}");
        if !categories.contains(&cat) {
            categories.push(cat.clone());
        }
        by_protocol.entry(p.clone()).or_default().insert(cat, v);
    }
    let series: Vec<(String, Vec<Option<f64>>)> = by_protocol
        .into_iter()
        .map(|(p, m)| (p, categories.iter().map(|c| m.get(c).copied()).collect()))
        .collect();
    svg::bar_chart(
        "R@100 delta, re-weighting minus cross-entropy",
        "points",
        &categories,
        &series,
    )
}

/// Mean constrained R@100 per (variant, class), classes by frequency.
fn per_class_table(classes: &Table) -> Result<Vec<Vec<String>>> {
    let mut acc: BTreeMap<(String, usize), (u64, Vec<f64>, Vec<String>)> = BTreeMap::new();
    let mut hash = String::new();
    for r in classes {
        if field(r, "protocol")? != Protocol::Constrained.name() {
            continue;
        }
        hash = field(r, "config_hash")?.to_string();
        let class: usize = field(r, "class")?
            .parse()
            .map_err(|_| Error::Input("bad class index".into()))?;
        let entry = acc
            .entry((field(r, "variant")?.to_string(), class))
            .or_insert((0, Vec::new(), Vec::new()));
        entry.0 = entry.0.max(field(r, "gt_count")?.parse().unwrap_or(0));
        let v = field(r, "recall@100")?;
        if !v.is_empty() {
            entry.1.push(parse_f64(v)?);
        }
        entry.2.push(field(r, "seed")?.to_string());
    }
    let mut rows: Vec<(u64, Vec<String>)> = acc
        .into_iter()
        .map(|((variant, class), (gt, v, seeds))| {
            (
                gt,
                vec![
                    hash.clone(),
                    seeds.join(";"),
                    variant,
                    class.to_string(),
                    gt.to_string(),
                    if v.is_empty() { String::new() } else { num(mean(&v)) },
                ],
            )
        })
        .collect();
    rows.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1[3].cmp(&b.1[3])).then_with(|| a.1[2].cmp(&b.1[2])));
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn per_class_svg(rows: &Table) -> String {
    let mut categories: Vec<String> = Vec::new();
    let mut by_variant: BTreeMap<String, HashMap<String, f64>> = BTreeMap::new();
    for r in rows {
        let cat = format!("c{} (n={})", r["class"], r["gt_count"]);
        if !categories.contains(&cat) {
            categories.push(cat.clone());
        }
        if let Ok(v) = r["mean_recall@100"].parse::<f64>() {
            by_variant.entry(r["variant"].clone()).or_default().insert(cat, v);
        }
    }
    let series: Vec<(String, Vec<Option<f64>>)> = by_variant
        .into_iter()
        .map(|(name, m)| (name, categories.iter().map(|c| m.get(c).copied()).collect()))
        .collect();
    svg::bar_chart("Constrained R@100 per class, by frequency", "recall@100", &categories, &series)
}

fn markdown_table(table: &Table, columns: &[&str]) -> String {
    let mut s = format!("| {} |\n|{}\n", columns.join(" | "), " --- |".repeat(columns.len()));
    for r in table {
        let cells: Vec<&str> = columns.iter().map(|c| r.get(*c).map_or("", String::as_str)).collect();
        s.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    s
}

pub fn cmd_report(dir: &Path) -> Result<bool> {
    let mut md = String::from("# Experiment report\n\n");
    let mut missing = Vec::new();
    let mut found = 0;

    match read_csv(&dir.join("train_classes.csv"))? {
        Some(classes) => {
            found += 1;
            let rows = per_class_table(&classes)?;
            let text = csv_string(
                &["config_hash", "seeds", "variant", "class", "gt_count", "mean_recall@100"],
                &rows,
            )?;
            write(&dir.join("per_class_recall.csv"), &text)?;
            let table = read_csv_str(&text)?;
            write(&dir.join("per_class_recall.svg"), &per_class_svg(&table))?;
            md.push_str("## Per-class recall\n\n![per-class recall](per_class_recall.svg)\n\n");
            md.push_str(&markdown_table(&table, &["variant", "class", "gt_count", "mean_recall@100", "seeds"]));
            md.push('\n');
        }
        None => missing.push("train_classes.csv"),
    }
    if let Some(summary) = read_csv(&dir.join("train_summary.csv"))? {
        md.push_str("## Training runs\n\n");
        md.push_str(&markdown_table(
            &summary,
            &["variant", "seed", "status", "protocol", "mR@50", "mR@100", "drop_precision"],
        ));
        md.push('\n');
    }
    match read_csv(&dir.join("sweep_summary.csv"))? {
        Some(summary) => {
            found += 1;
            write(&dir.join("sweep.svg"), &sweep_svg(&summary))?;
            md.push_str("## Re-weighting sweep\n\n![sweep](sweep.svg)\n\n");
            md.push_str(&markdown_table(
                &summary,
                &["label", "n", "mean_mR@100", "min_mR@100", "max_mR@100", "seeds"],
            ));
            md.push('\n');
        }
        None => missing.push("sweep_summary.csv"),
    }
    match read_csv(&dir.join("observe.csv"))? {
        Some(table) => {
            found += 1;
            write(&dir.join("observe.svg"), &observe_svg(&table))?;
            md.push_str("## Observation deltas\n\n![observation](observe.svg)\n\n");
            md.push_str(&markdown_table(
                &table,
                &["group", "class", "protocol", "mean_delta", "min_delta", "max_delta", "seeds"],
            ));
            md.push('\n');
        }
        None => missing.push("observe.csv"),
    }
    if let Some(table) = read_csv(&dir.join("ablate.csv"))? {
        found += 1;
        md.push_str("## Ablation grid\n\n");
        md.push_str(&markdown_table(
            &table,
            &["center_mode", "normalization", "protocol", "mean_mR@50", "mean_mR@100", "min_mR@100", "max_mR@100"],
        ));
        md.push('\n');
    }
    if found == 0 {
        md.push_str("no runs\n");
        println!("no runs in {}", dir.display());
    } else if !missing.is_empty() {
        md.push_str("## Missing\n\n");
        for m in &missing {
            md.push_str(&format!("- {m}\n"));
        }
    }
    if let Some(h) = first_hash(dir)? {
        md.push_str(&format!("\nconfig hash: `{h}`\n"));
    }
    write(&dir.join("report.md"), &md)?;
    println!("wrote {}", dir.join("report.md").display());
    Ok(true)
}

fn first_hash(dir: &Path) -> Result<Option<String>> {
    for name in ["train_summary.csv", "sweep_summary.csv", "observe.csv", "ablate.csv"] {
        if let Some(t) = read_csv(&dir.join(name))? {
            if let Some(h) = t.first().and_then(|r| r.get("config_hash")) {
                return Ok(Some(h.clone()));
            }
        }
    }
    Ok(None)
}
