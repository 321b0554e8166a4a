//! Aggregates training runs (plus any probe results stored inside them) into
//! report.md, a deterministic summary.json, and PNG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use reldiff_core::train::{LossMode, TrainConfig};

use crate::commands::ReportArgs;
use crate::plot;
use crate::user_err;

#[derive(Debug, Clone, Serialize)]
struct ProbeEntry {
    source: String,
    layer: Option<usize>,
    accuracy: f64,
    ci_low: f64,
    ci_high: f64,
    n_test: usize,
    feature_dim: usize,
}

#[derive(Debug, Clone, Serialize)]
struct RunSummary {
    name: String,
    mode: LossMode,
    lambda: f64,
    margin: f64,
    align_depth: usize,
    seed: u64,
    steps: usize,
    final_l_diff: f64,
    final_l_total: f64,
    mean_last10_l_total: f64,
    probes: Vec<ProbeEntry>,
    #[serde(skip)]
    curve: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    mode: LossMode,
    lambda: f64,
    margin: f64,
    align_depth: usize,
    seeds: Vec<u64>,
    probe_accuracy_mean: Option<f64>,
    probe_accuracy_std: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Excluded {
    dir: String,
    reason: String,
}

#[derive(Debug, Serialize)]
struct Summary {
    dataset_hash: String,
    runs: Vec<RunSummary>,
    groups: Vec<GroupSummary>,
    excluded: Vec<Excluded>,
}

fn parse_metrics(path: &Path) -> anyhow::Result<Vec<(f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    anyhow::ensure!(
        header == reldiff_core::train::METRICS_HEADER,
        "unexpected metrics header {header:?}"
    );
    let mut rows = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(cols.len() == 6, "malformed metrics row {line:?}");
        let step: f64 = cols[0].parse()?;
        let l_diff: f64 = cols[1].parse()?;
        let l_total: f64 = cols[3].parse()?;
        rows.push((step, l_diff, l_total));
    }
    anyhow::ensure!(!rows.is_empty(), "metrics file is empty");
    Ok(rows)
}

fn load_run(dir: &Path) -> anyhow::Result<(RunSummary, String)> {
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("resolved_config.json"))?)?;
    anyhow::ensure!(
        resolved.get("command").and_then(|v| v.as_str()) == Some("train"),
        "not a training run directory"
    );
    let cfg: TrainConfig = serde_json::from_value(
        resolved
            .get("train")
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("missing train config"))?,
    )?;
    let ds_hash = resolved
        .get("dataset_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| anyhow::anyhow!("missing dataset hash"))?
        .to_string();
    anyhow::ensure!(dir.join("final.ckpt").exists(), "run has no final.ckpt");
    let rows = parse_metrics(&dir.join("metrics.csv"))?;
    let last10 = &rows[rows.len().saturating_sub(10)..];
    let mean_last10 = last10.iter().map(|r| r.2).sum::<f64>() / last10.len() as f64;

    let mut probes = Vec::new();
    let mut probe_files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("probe") && name.ends_with(".json")
        })
        .collect();
    probe_files.sort();
    for path in probe_files {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
        let run_ds = v.get("dataset_hash").and_then(|h| h.as_str());
        anyhow::ensure!(
            run_ds == Some(ds_hash.as_str()),
            "probe {} was computed on a different dataset",
            path.display()
        );
        let p = v
            .get("probe")
            .ok_or_else(|| anyhow::anyhow!("malformed probe file {}", path.display()))?;
        probes.push(ProbeEntry {
            source: v
                .get("source")
                .and_then(|s| s.as_str())
                .unwrap_or("?")
                .to_string(),
            layer: p.get("layer").and_then(|x| x.as_u64()).map(|x| x as usize),
            accuracy: p["accuracy"].as_f64().unwrap_or(f64::NAN),
            ci_low: p["ci_low"].as_f64().unwrap_or(f64::NAN),
            ci_high: p["ci_high"].as_f64().unwrap_or(f64::NAN),
            n_test: p["n_test"].as_u64().unwrap_or(0) as usize,
            feature_dim: p["feature_dim"].as_u64().unwrap_or(0) as usize,
        });
    }

    let (last_diff, last_total) = rows.last().map(|r| (r.1, r.2)).unwrap();
    Ok((
        RunSummary {
            name: dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_string(),
            mode: cfg.mode,
            lambda: cfg.loss.lambda,
            margin: cfg.loss.margin,
            align_depth: cfg.loss.align_depth,
            seed: cfg.seed,
            steps: cfg.steps,
            final_l_diff: last_diff,
            final_l_total: last_total,
            mean_last10_l_total: mean_last10,
            probes,
            curve: rows.iter().map(|r| (r.0, r.2)).collect(),
        },
        ds_hash,
    ))
}

fn mode_label(mode: LossMode) -> &'static str {
    match mode {
        LossMode::DiffOnly => "diff-only",
        LossMode::DiffTrd => "diff-trd",
        LossMode::DiffRepa => "diff-repa",
    }
}

/// First probe accuracy of a run, preferring the transformer's aligned layer.
fn run_probe_accuracy(run: &RunSummary) -> Option<f64> {
    run.probes
        .iter()
        .find(|p| p.source.starts_with("dit-layer"))
        .or_else(|| run.probes.first())
        .map(|p| p.accuracy)
}

pub fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    if a.out.exists() && a.out.read_dir()?.next().is_some() && !a.force {
        return Err(user_err(format!(
            "{} already exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    std::fs::create_dir_all(&a.out)?;

    let mut runs: Vec<RunSummary> = Vec::new();
    let mut excluded = Vec::new();
    let mut hashes: Vec<(String, String)> = Vec::new();
    for dir in &a.runs {
        match load_run(dir) {
            Ok((run, hash)) => {
                hashes.push((run.name.clone(), hash));
                runs.push(run);
            }
            Err(e) => excluded.push(Excluded {
                dir: dir.display().to_string(),
                reason: format!("{e:#}"),
            }),
        }
    }
    if runs.is_empty() {
        return Err(user_err(format!(
            "no usable runs among {} inputs: {}",
            a.runs.len(),
            excluded
                .iter()
                .map(|e| format!("{} ({})", e.dir, e.reason))
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let dataset_hash = hashes[0].1.clone();
    if let Some((name, other)) = hashes.iter().find(|(_, h)| *h != dataset_hash) {
        return Err(user_err(format!(
            "runs mix datasets: {} was trained on {} but {} used {}",
            hashes[0].0,
            &dataset_hash[..12],
            name,
            &other[..12]
        )));
    }
    runs.sort_by(|x, y| x.name.cmp(&y.name));

    // group runs that differ only by seed
    let mut grouped: BTreeMap<(String, u64, u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        let key = (
            mode_label(run.mode).to_string(),
            run.lambda.to_bits(),
            run.margin.to_bits(),
            run.align_depth,
        );
        grouped.entry(key).or_default().push(i);
    }
    let mut groups = Vec::new();
    for ((_, _, _, depth), members) in &grouped {
        let first = &runs[members[0]];
        let accs: Vec<f64> = members
            .iter()
            .filter_map(|&i| run_probe_accuracy(&runs[i]))
            .collect();
        let (mean, std) = if accs.is_empty() {
            (None, None)
        } else {
            let m = accs.iter().sum::<f64>() / accs.len() as f64;
            let var = accs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / accs.len() as f64;
            (Some(m), Some(var.sqrt()))
        };
        groups.push(GroupSummary {
            mode: first.mode,
            lambda: first.lambda,
            margin: first.margin,
            align_depth: *depth,
            seeds: members.iter().map(|&i| runs[i].seed).collect(),
            probe_accuracy_mean: mean,
            probe_accuracy_std: std,
        });
    }
    groups.sort_by(|x, y| {
        (mode_label(x.mode), x.lambda, x.align_depth)
            .partial_cmp(&(mode_label(y.mode), y.lambda, y.align_depth))
            .unwrap()
    });

    // charts
    let curves: Vec<(Vec<(f64, f64)>, usize)> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| (r.curve.clone(), i))
        .collect();
    plot::line_chart(&curves, &a.out.join("loss_curves.png"))?;

    let with_acc: Vec<&GroupSummary> = groups
        .iter()
        .filter(|g| g.probe_accuracy_mean.is_some())
        .collect();
    if !with_acc.is_empty() {
        let lo = with_acc
            .iter()
            .map(|g| g.probe_accuracy_mean.unwrap() - g.probe_accuracy_std.unwrap())
            .fold(f64::INFINITY, f64::min);
        let hi = with_acc
            .iter()
            .map(|g| g.probe_accuracy_mean.unwrap() + g.probe_accuracy_std.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let bars: Vec<(f64, f64, usize)> = with_acc
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    g.probe_accuracy_mean.unwrap(),
                    g.probe_accuracy_std.unwrap(),
                    i,
                )
            })
            .collect();
        plot::bar_chart(
            &bars,
            (lo - 0.05).max(0.0),
            (hi + 0.05).min(1.0),
            &a.out.join("probe_accuracy.png"),
        )?;
        sweep_chart(&with_acc, Sweep::Lambda, &a.out.join("lambda_sweep.png"))?;
        sweep_chart(&with_acc, Sweep::Depth, &a.out.join("depth_sweep.png"))?;
    }

    let summary = Summary {
        dataset_hash,
        runs,
        groups,
        excluded,
    };
    std::fs::write(
        a.out.join("summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    std::fs::write(a.out.join("report.md"), render_markdown(&summary))?;
    println!(
        "report over {} runs ({} excluded) -> {}",
        summary.runs.len(),
        summary.excluded.len(),
        a.out.display()
    );
    Ok(())
}

enum Sweep {
    Lambda,
    Depth,
}

/// Probe accuracy vs lambda (one line per depth) or vs depth (one line per
/// lambda), over the relational-distillation groups.
fn sweep_chart(groups: &[&GroupSummary], sweep: Sweep, path: &Path) -> anyhow::Result<()> {
    let mut series: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for g in groups {
        if !matches!(g.mode, LossMode::DiffTrd) {
            continue;
        }
        let (key, x) = match sweep {
            Sweep::Lambda => (g.align_depth as u64, g.lambda),
            Sweep::Depth => (g.lambda.to_bits(), g.align_depth as f64),
        };
        series
            .entry(key)
            .or_default()
            .push((x, g.probe_accuracy_mean.unwrap()));
    }
    let mut lines: Vec<(Vec<(f64, f64)>, usize)> = Vec::new();
    for (i, (_, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
        lines.push((pts, i));
    }
    if !lines.is_empty() {
        plot::line_chart(&lines, path)?;
    }
    Ok(())
}

fn fmt_probe(p: &ProbeEntry) -> String {
    format!(
        "{}: {:.4} [{:.4}, {:.4}]",
        p.source, p.accuracy, p.ci_low, p.ci_high
    )
}

fn render_markdown(s: &Summary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Relational distillation report\n");
    let _ = writeln!(md, "Dataset: `{}`\n", s.dataset_hash);

    let _ = writeln!(md, "## Runs\n");
    let _ = writeln!(
        md,
        "| run | mode | lambda | margin | depth | seed | steps | final l_diff | final l_total | probes |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|---|");
    for r in &s.runs {
        let probes = if r.probes.is_empty() {
            "-".to_string()
        } else {
            r.probes.iter().map(fmt_probe).collect::<Vec<_>>().join("; ")
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {:.5} | {:.5} | {} |",
            r.name,
            mode_label(r.mode),
            r.lambda,
            r.margin,
            r.align_depth,
            r.seed,
            r.steps,
            r.final_l_diff,
            r.final_l_total,
            probes
        );
    }

    let _ = writeln!(md, "\n## Groups (seeds pooled)\n");
    let _ = writeln!(
        md,
        "| # | mode | lambda | margin | depth | seeds | probe accuracy (mean +- std) |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|");
    let mut bar = 0usize;
    for g in &s.groups {
        let acc = match (g.probe_accuracy_mean, g.probe_accuracy_std) {
            (Some(m), Some(sd)) => {
                bar += 1;
                format!("{m:.4} +- {sd:.4} (bar {bar})")
            }
            _ => "-".to_string(),
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {:?} | {} |",
            bar,
            mode_label(g.mode),
            g.lambda,
            g.margin,
            g.align_depth,
            g.seeds,
            acc
        );
    }

    let _ = writeln!(md, "\n## Charts\n");
    let _ = writeln!(md, "![training loss](loss_curves.png)\n");
    let _ = writeln!(
        md,
        "![probe accuracy by group](probe_accuracy.png) bars follow the group table order\n"
    );
    let _ = writeln!(md, "![lambda sweep](lambda_sweep.png)\n");
    let _ = writeln!(md, "![depth sweep](depth_sweep.png)\n");

    if !s.excluded.is_empty() {
        let _ = writeln!(md, "## Excluded runs\n");
        for e in &s.excluded {
            let _ = writeln!(md, "- `{}`: {}", e.dir, e.reason);
        }
    }
    md
}
