use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use icone::data::{self, Dataset};
use icone::experiment::{self, AblationRow, Aggregate, ExperimentConfig};
use icone::metrics::MetricsReport;
use icone::train::{self, RunArtifacts};
use icone::Tensor;
use toml::Table;

use crate::error::{CliError, Result};
use crate::{overrides, svg};

pub const OUTPUT_ROOT_ENV: &str = "ICONE_OUTPUT_ROOT";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(CliError::file(path))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::file(parent))?;
    }
    fs::write(path, contents).map_err(CliError::file(path))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(CliError::file(path))?))
}

/// Merges the optional config file with command-line overrides.
pub fn load_config(path: &Option<PathBuf>, rest: &[String]) -> Result<ExperimentConfig> {
    let (late, rest) = overrides::take_config(rest)?;
    let path = &path.clone().or(late);
    let mut doc = match path {
        Some(p) => read_text(p)?.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => Table::new(),
    };
    overrides::apply(&mut doc, &rest)?;
    let explicit_snapshots = doc.get("train").and_then(|t| t.get("snapshot_epochs")).is_some();
    let mut cfg: ExperimentConfig =
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    if !explicit_snapshots {
        // default snapshot epochs follow a shortened run
        let epochs = cfg.train.epochs;
        let snaps = &mut cfg.train.snapshot_epochs;
        if snaps.iter().any(|&e| e >= epochs) && epochs > 0 {
            snaps.retain(|&e| e < epochs);
            if !snaps.contains(&(epochs - 1)) {
                snaps.push(epochs - 1);
            }
        }
    }
    cfg.data.validate()?;
    Ok(cfg)
}

/// `$ICONE_OUTPUT_ROOT/<output_dir>`, defaulting to `runs/<command>`.
fn output_dir(cfg: &ExperimentConfig, command: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    match &cfg.output_dir {
        Some(d) => root.join(d),
        None => root.join(command),
    }
}

fn snapshot_stem(epoch: usize) -> String {
    format!("epoch_{epoch:03}")
}

pub fn generate(config: &Option<PathBuf>, rest: &[String]) -> Result<()> {
    let cfg = load_config(config, rest)?;
    let ds = data::generate(&cfg.data)?;
    let dir = output_dir(&cfg, "generate");
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write(&dir.join("dataset.csv"), buf)?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    eprintln!("wrote {} instances ({} train, {} test) to {}", ds.len(), ds.train.len(), ds.test.len(), dir.display());
    Ok(())
}

/// Writes every artifact of a finished run into `dir` and returns the
/// final metrics.
fn write_run(dir: &Path, cfg: &ExperimentConfig, ds: &Dataset, run: &RunArtifacts) -> Result<MetricsReport> {
    let mut stored = cfg.clone();
    stored.train = run.config.clone();
    write(&dir.join("config.toml"), stored.to_toml())?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write(&dir.join("dataset.csv"), buf)?;

    let mut buf = Vec::new();
    run.write_curves_csv(&mut buf)?;
    write(&dir.join("loss_curves.csv"), buf)?;

    let all: Vec<usize> = (0..ds.len()).collect();
    let mut snap_rows = format!("epoch,{}\n", MetricsReport::csv_header());
    for snap in &run.snapshots {
        let stem = snapshot_stem(snap.epoch);
        let mut buf = Vec::new();
        snap.write_csv(&mut buf, ds, &all)?;
        write(&dir.join("snapshots").join(format!("{stem}.csv")), buf)?;
        let mut buf = Vec::new();
        snap.model.write_csv(&mut buf)?;
        write(&dir.join("snapshots").join(format!("{stem}_params.csv")), buf)?;
        let r = experiment::evaluate_embeddings(ds, &snap.embeddings, &snap.model.encoder, &cfg.eval)?;
        snap_rows.push_str(&format!("{},{}\n", snap.epoch, r.csv_row()));
    }
    write(&dir.join("snapshot_metrics.csv"), snap_rows)?;

    let mut buf = Vec::new();
    run.model.write_csv(&mut buf)?;
    write(&dir.join("params.csv"), buf)?;

    let report = experiment::evaluate_run(ds, run, &cfg.eval)?;
    write(&dir.join("metrics.json"), report.to_json() + "\n")?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write(&dir.join("metrics.csv"), buf)?;
    Ok(report)
}

fn progress(tag: &str, epochs: usize) -> impl FnMut(usize, &icone::losses::LossBreakdown) + '_ {
    let every = (epochs / 10).max(1);
    move |e, l| {
        if e % every == 0 || e + 1 == epochs {
            eprintln!(
                "{tag}epoch {e:>4}/{epochs}  l_vv {:.4}  l_vi {:.4}  l_div {:.5}  total {:.4}",
                l.l_vv, l.l_vi, l.l_div, l.total
            );
        }
    }
}

pub fn train(config: &Option<PathBuf>, rest: &[String], dataset: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, rest)?;
    let ds = match dataset {
        Some(p) => Dataset::read_csv(open(p)?)?,
        None => data::generate(&cfg.data)?,
    };
    let dir = output_dir(&cfg, "train");
    let run = train::train_observed(&ds, &cfg.train, progress("", cfg.train.epochs))?;
    let report = write_run(&dir, &cfg, &ds, &run)?;
    println!("{}", report.to_json());
    eprintln!("run written to {}", dir.display());
    Ok(())
}

pub fn ablate(config: &Option<PathBuf>, rest: &[String]) -> Result<()> {
    let cfg = load_config(config, rest)?;
    if cfg.ablate.seeds.is_empty() || cfg.ablate.variants.is_empty() {
        return Err(CliError::Config("ablate needs at least one seed and one variant".into()));
    }
    let dir = output_dir(&cfg, "ablate");
    let mut per_variant: Vec<Vec<(u64, MetricsReport)>> = vec![Vec::new(); cfg.ablate.variants.len()];
    let mut failures: Vec<(String, CliError)> = Vec::new();
    let mut paths = Vec::new();
    for &seed in &cfg.ablate.seeds {
        let spec = data::GmmSpec { seed, ..cfg.data.clone() };
        let ds = data::generate(&spec)?;
        for (k, &variant) in cfg.ablate.variants.iter().enumerate() {
            let cell = dir.join(variant.key()).join(format!("seed_{seed}"));
            let tag = format!("[{} seed {seed}] ", variant.key());
            let train_cfg = icone::train::TrainConfig { losses: variant.losses(), seed, ..cfg.train.clone() };
            let mut cell_cfg = cfg.clone();
            cell_cfg.data = spec.clone();
            let outcome = train::train_observed(&ds, &train_cfg, progress(&tag, train_cfg.epochs))
                .map_err(CliError::from)
                .and_then(|run| write_run(&cell, &cell_cfg, &ds, &run));
            match outcome {
                Ok(report) => {
                    eprintln!("{tag}knn5 {:.3}  linear {:.3}", report.knn5_acc, report.linear_acc);
                    per_variant[k].push((seed, report));
                    paths.push(cell);
                }
                Err(e) => {
                    eprintln!("{tag}failed: {e}");
                    failures.push((format!("{}/seed_{seed}", variant.key()), e));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (k, &variant) in cfg.ablate.variants.iter().enumerate() {
        let per_seed = std::mem::take(&mut per_variant[k]);
        if per_seed.is_empty() {
            continue;
        }
        let reports: Vec<MetricsReport> = per_seed.iter().map(|(_, r)| *r).collect();
        rows.push(AblationRow { variant, aggregate: Aggregate::of(&reports)?, per_seed });
    }
    let mut md = experiment::ablation_markdown(&rows);
    md.push_str("\nRuns:\n");
    for p in &paths {
        md.push_str(&format!("- {}\n", p.display()));
    }
    if !failures.is_empty() {
        md.push_str("\nFailed cells:\n");
        for (cell, e) in &failures {
            md.push_str(&format!("- {cell}: {e}\n"));
        }
    }
    write(&dir.join("ablation.md"), &md)?;
    write(&dir.join("ablation.csv"), experiment::ablation_csv(&rows))?;
    let failed: Vec<serde_json::Value> = failures
        .iter()
        .map(|(cell, e)| serde_json::json!({ "cell": cell, "error": e.to_string(), "exit_code": e.exit_code() }))
        .collect();
    let summary = serde_json::json!({ "rows": rows, "failed": failed });
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    print!("{md}");
    match failures.first() {
        None => Ok(()),
        Some((_, e)) => {
            Err(CliError::Cells { failed: failures.len(), total: failures.len() + paths.len(), code: e.exit_code() })
        }
    }
}

/// Loads the stored config and dataset of a run directory.
fn load_run(run: &Path) -> Result<(ExperimentConfig, Dataset)> {
    let cfg = ExperimentConfig::from_toml(&read_text(&run.join("config.toml"))?)?;
    let ds = Dataset::read_csv(open(&run.join("dataset.csv"))?)?;
    Ok((cfg, ds))
}

pub fn eval(run: &Path, epoch: Option<usize>) -> Result<()> {
    let (cfg, ds) = load_run(run)?;
    let mut model = train::init_model(&ds, &cfg.train)?;
    let (embeddings, stem) = match epoch {
        Some(e) => {
            let stem = snapshot_stem(e);
            let snaps = run.join("snapshots");
            model.read_csv_into(open(&snaps.join(format!("{stem}_params.csv")))?)?;
            let (z, present) = train::read_snapshot_csv(open(&snaps.join(format!("{stem}.csv")))?, ds.len())?;
            if let Some(i) = present.iter().position(|p| !p) {
                return Err(CliError::Core(icone::Error::Parse(format!("snapshot {stem} lacks instance {i}"))));
            }
            (z, format!("eval_{stem}"))
        }
        None => {
            model.read_csv_into(open(&run.join("params.csv"))?)?;
            (model.encoder.encode_values(&ds.points)?, "eval_final".to_string())
        }
    };
    let report = experiment::evaluate_embeddings(&ds, &embeddings, &model.encoder, &cfg.eval)?;
    write(&run.join(format!("{stem}.json")), report.to_json() + "\n")?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write(&run.join(format!("{stem}.csv")), buf)?;
    println!("{}", report.to_json());
    Ok(())
}

/// Header and numeric rows of a small CSV file.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        rows.push(
            row.map_err(|_| CliError::Core(icone::Error::Parse(format!("{}: bad row {line:?}", path.display()))))?,
        );
    }
    Ok((header, rows))
}

fn series(header: &[String], rows: &[Vec<f64>], names: &[&str]) -> Vec<(String, Vec<(f64, f64)>)> {
    names
        .iter()
        .filter_map(|&n| {
            let k = header.iter().position(|h| h == n)?;
            Some((n.to_string(), rows.iter().map(|r| (r[0], r[k])).collect()))
        })
        .collect()
}

fn scatter_points(z: &Tensor, labels: &[usize], present: &[bool]) -> Vec<(f64, f64, usize)> {
    (0..z.rows())
        .filter(|&i| present[i])
        .map(|i| {
            let r = z.row(i);
            (r[0], r.get(1).copied().unwrap_or(0.0), labels[i])
        })
        .collect()
}

pub fn plot(run: &Path) -> Result<()> {
    let (cfg, ds) = load_run(run)?;
    let out = run.join("plots");
    let mut written = 0usize;
    let mut missing = Vec::new();
    for &e in &cfg.train.snapshot_epochs {
        let stem = snapshot_stem(e);
        let path = run.join("snapshots").join(format!("{stem}.csv"));
        if !path.exists() {
            missing.push(stem);
            continue;
        }
        let (z, present) = train::read_snapshot_csv(open(&path)?, ds.len())?;
        let title = if z.cols() == 2 { format!("epoch {e}") } else { format!("epoch {e} (dims 0, 1 of {})", z.cols()) };
        write(
            &out.join(format!("snapshot_{stem}.svg")),
            svg::scatter(&scatter_points(&z, &ds.labels, &present), &title),
        )?;
        written += 1;
    }
    let curves = run.join("loss_curves.csv");
    if curves.exists() {
        let (h, rows) = read_table(&curves)?;
        let s = series(&h, &rows, &["l_vv", "l_vi", "l_div", "total"]);
        write(&out.join("loss_curves.svg"), svg::line_chart(&s, "training losses", "epoch", "loss"))?;
        written += 1;
    } else {
        missing.push("loss_curves.csv".into());
    }
    let metrics = run.join("snapshot_metrics.csv");
    if metrics.exists() {
        let (h, rows) = read_table(&metrics)?;
        let acc = series(&h, &rows, &["knn5_acc", "linear_acc"]);
        write(&out.join("accuracy.svg"), svg::line_chart(&acc, "downstream accuracy", "epoch", "balanced accuracy"))?;
        let geo = series(&h, &rows, &["l_align", "l_uniform"]);
        write(&out.join("align_uniform.svg"), svg::line_chart(&geo, "alignment and uniformity", "epoch", "value"))?;
        written += 2;
    } else {
        missing.push("snapshot_metrics.csv".into());
    }
    if !missing.is_empty() {
        eprintln!("missing: {}", missing.join(", "));
    }
    if written == 0 {
        return Err(CliError::Missing(format!("nothing to plot in {}", run.display())));
    }
    eprintln!("wrote {written} figures to {}", out.display());
    Ok(())
}
