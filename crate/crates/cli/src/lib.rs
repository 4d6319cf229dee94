//! Command implementations for the `softmask` binary.
//!
//! Everything here is a thin shell over the library: parse arguments,
//! call into `softmask_lm`, format the result. Exit codes: 0 success,
//! 1 runtime failure (partial report written when possible), 2 invalid
//! configuration or arguments.

use std::path::{Path, PathBuf};

use softmask_lm::config::{Method, RunConfig};
use softmask_lm::harness::{format_report, run_methods_partial, write_report, Report};
use softmask_lm::importance::{
    compute_importance, normalize_importance, LossKind, NormalizedImportance,
};
use softmask_lm::model::Model;

/// Environment variable holding the default output root for reports.
pub const OUT_ROOT_ENV: &str = "SOFTMASK_OUT";

const SNAPSHOT_FORMAT: &str = "importance-snapshot/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Resolve the report directory: explicit flag, then the config's own
/// `output_dir`, then `$SOFTMASK_OUT/softmask-results`, then
/// `./softmask-results`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join("softmask-results"),
        None => PathBuf::from("softmask-results"),
    }
}

/// `run`: execute the configured methods over the configured seeds and
/// write `results.json` / `results.csv`.
pub fn cmd_run(
    config_path: &Path,
    method_override: &[Method],
    seed_override: &[u64],
    out_flag: Option<&Path>,
) -> i32 {
    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if !method_override.is_empty() {
        cfg.methods = method_override.to_vec();
    }
    if !seed_override.is_empty() {
        cfg.seeds = seed_override.to_vec();
    }
    let violations = cfg.violations();
    if !violations.is_empty() {
        eprintln!("invalid config:");
        for v in &violations {
            eprintln!("  - {v}");
        }
        return EXIT_USAGE;
    }
    let out_dir = resolve_out_dir(out_flag, &cfg);
    let methods = cfg.methods.clone();
    let seeds = cfg.seeds.clone();
    let (report, failure) = run_methods_partial(&cfg, &methods, &seeds, None);
    if let Err(e) = write_report(&report, &out_dir) {
        eprintln!("failed to write report to {}: {e}", out_dir.display());
        return EXIT_RUNTIME;
    }
    print!("{}", format_report(&report));
    println!("report written to {}", out_dir.display());
    match failure {
        None => EXIT_OK,
        Some(e) => {
            eprintln!("run failed partway; partial report written: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, i32> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read config {}: {e}", path.display());
            return Err(EXIT_USAGE);
        }
    };
    match serde_json::from_str::<RunConfig>(&text) {
        Ok(c) => Ok(c),
        Err(e) => {
            eprintln!("cannot parse config {}: {e}", path.display());
            Err(EXIT_USAGE)
        }
    }
}

/// Read a whitespace-tokenized UTF-8 corpus file, one sequence per line,
/// encoded with the model's vocabulary and truncated to its context size.
pub fn read_corpus(model: &Model, path: &Path) -> std::io::Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let max = model.config.max_seq_len;
    Ok(text
        .lines()
        .map(|l| {
            let mut ids = model.vocab.encode(l);
            ids.truncate(max);
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ImportanceSnapshot {
    format: String,
    loss_kind: LossKind,
    seed: u64,
    importance: NormalizedImportance,
}

/// `importance`: load a checkpoint, measure unit importance over a corpus
/// file, write the normalized snapshot, and print the strongest units.
pub fn cmd_importance(
    checkpoint: &Path,
    corpus: &Path,
    loss_kind: LossKind,
    seed: u64,
    out: &Path,
    top_k: usize,
) -> i32 {
    let model = match Model::load(checkpoint) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("cannot load checkpoint {}: {e}", checkpoint.display());
            return EXIT_USAGE;
        }
    };
    let sequences = match read_corpus(&model, corpus) {
        Ok(s) if !s.is_empty() => s,
        Ok(_) => {
            eprintln!("corpus {} contains no sequences", corpus.display());
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("cannot read corpus {}: {e}", corpus.display());
            return EXIT_USAGE;
        }
    };
    let raw = match compute_importance(&model, &sequences, loss_kind, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("importance computation failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    let imp = normalize_importance(&raw);
    let snap = ImportanceSnapshot {
        format: SNAPSHOT_FORMAT.to_string(),
        loss_kind,
        seed,
        importance: imp.clone(),
    };
    let json = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
    if let Err(e) = std::fs::write(out, json) {
        eprintln!("cannot write snapshot {}: {e}", out.display());
        return EXIT_RUNTIME;
    }
    print!("{}", format_top_units(&imp, top_k));
    println!("snapshot written to {}", out.display());
    EXIT_OK
}

/// The `top_k` highest-importance units of each layer, across all unit
/// kinds, as display lines.
pub fn format_top_units(imp: &NormalizedImportance, top_k: usize) -> String {
    let mut s = String::new();
    let n_layers = imp.0.head.len();
    for l in 0..n_layers {
        let mut units: Vec<(String, f64)> = Vec::new();
        for (i, &v) in imp.0.head[l].iter().enumerate() {
            units.push((format!("head{i}"), v));
        }
        for (i, &v) in imp.0.inter[l].iter().enumerate() {
            units.push((format!("inter{i}"), v));
        }
        for (i, &v) in imp.0.out[l].iter().enumerate() {
            units.push((format!("out{i}"), v));
        }
        units.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        units.truncate(top_k);
        s.push_str(&format!("layer {l}:"));
        for (name, v) in units {
            s.push_str(&format!("  {name}={v:.4}"));
        }
        s.push('\n');
    }
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Render the full per-method summary: accuracy matrices per seed,
/// forgetting and final accuracy as mean ± std across seeds.
pub fn format_report_detail(report: &Report) -> String {
    let mut s = String::new();
    for summary in report.methods.values() {
        s.push_str(&format!("== {} ==\n", summary.method));
        for sr in &summary.per_seed {
            s.push_str(&format!("seed {}\n", sr.seed));
            for row in &sr.accuracy.acc {
                s.push_str("  ");
                for a in row {
                    s.push_str(&format!("{a:.3} "));
                }
                s.push('\n');
            }
        }
        let forgettings: Option<Vec<f64>> =
            summary.per_seed.iter().map(|r| r.forgetting).collect();
        match forgettings {
            Some(f) if !f.is_empty() => {
                let (m, sd) = mean_std(&f);
                s.push_str(&format!("forgetting: {m:.4} +/- {sd:.4}\n"));
            }
            _ => s.push_str("forgetting: n/a\n"),
        }
        let finals: Vec<f64> = summary.per_seed.iter().map(|r| r.final_avg_accuracy).collect();
        let (m, sd) = mean_std(&finals);
        s.push_str(&format!("final accuracy: {m:.4} +/- {sd:.4}\n\n"));
    }
    s
}

/// Minimal SVG line plot of each method's final-row accuracies.
fn plot_svg(report: &Report) -> String {
    let (w, h, pad) = (480.0, 280.0, 40.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    ));
    let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    for (mi, summary) in report.methods.values().enumerate() {
        let Some(sr) = summary.per_seed.first() else { continue };
        let Some(last) = sr.accuracy.acc.last() else { continue };
        let n = last.len().max(2);
        let pts: Vec<String> = last
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
                let y = (h - pad) - (h - 2.0 * pad) * a;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = colors[mi % colors.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{}</text>\n",
            pts.join(" "),
            w - pad + 4.0,
            pad + 14.0 * mi as f64,
            summary.method
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// `report`: re-render the summary from a previously written results
/// directory; optionally emit an SVG plot.
pub fn cmd_report(results_dir: &Path, plot: bool) -> i32 {
    let path = results_dir.join("results.json");
    let report: Report = match std::fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return EXIT_USAGE;
        }
    };
    print!("{}", format_report(&report));
    print!("{}", format_report_detail(&report));
    if plot {
        let svg_path = results_dir.join("accuracy.svg");
        match std::fs::write(&svg_path, plot_svg(&report)) {
            Ok(()) => println!("plot written to {}", svg_path.display()),
            Err(e) => eprintln!("plot skipped ({e}); summary table printed above"),
        }
    }
    EXIT_OK
}
