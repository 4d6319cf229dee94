//! Continual-learning harness: synthetic domain corpora, sequential
//! training, end-task evaluation, and report writing.
//!
//! Each domain shares one pool of trigger tokens but maps them to its own
//! disjoint response tokens. Training on a later domain therefore rewires
//! what a trigger predicts, which is exactly the interference continual
//! learning has to survive. The end task for a domain is to tell
//! correctly-paired sequences from derangement-paired ones; both classes
//! use identical token marginals, so a classifier can only succeed if the
//! encoder still represents that domain's pairings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Method, RunConfig};
use crate::importance::{
    compute_importance, importance_similarity, normalize_importance, random_importance,
    ImportanceError, ImportanceStore, LossKind, NormalizedImportance,
};
use crate::model::{Model, ModelError, Vocab, FIRST_REGULAR_ID};
use crate::rng::{mix2, mix3, seeded_rng};
use crate::trainer::{fine_tune, train_domain, TrainConfig, TrainError};

const SALT_MODEL: u64 = 0x4d4f;
const SALT_CORPUS: u64 = 0xc0a0;
const SALT_GENERAL: u64 = 0x6e;
const SALT_TRAIN: u64 = 0x7a;
const SALT_IMPORTANCE: u64 = 0x1a;
const SALT_TASK_TRAIN: u64 = 0xe1;
const SALT_TASK_TEST: u64 = 0xe2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error("report io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Token-id layout induced by a [`RunConfig`].
pub struct TokenLayout {
    pub filler_base: u32,
    pub trigger_base: u32,
    pub n_fillers: u32,
    pub n_triggers: u32,
    resp_bases: Vec<u32>,
}

impl TokenLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        let filler_base = FIRST_REGULAR_ID;
        let trigger_base = filler_base + cfg.n_fillers as u32;
        let resp0 = trigger_base + cfg.n_triggers as u32;
        let resp_bases =
            (0..cfg.n_domains).map(|k| resp0 + (k * cfg.n_triggers) as u32).collect();
        TokenLayout {
            filler_base,
            trigger_base,
            n_fillers: cfg.n_fillers as u32,
            n_triggers: cfg.n_triggers as u32,
            resp_bases,
        }
    }

    pub fn filler(&self, i: u32) -> u32 {
        self.filler_base + i % self.n_fillers
    }

    pub fn trigger(&self, i: u32) -> u32 {
        self.trigger_base + i % self.n_triggers
    }

    /// Domain `k`'s response for trigger index `i`.
    pub fn response(&self, k: usize, i: u32) -> u32 {
        self.resp_bases[k] + i % self.n_triggers
    }

    pub fn vocab(&self, cfg: &RunConfig) -> Vocab {
        let mut regular = Vec::new();
        for i in 0..cfg.n_fillers {
            regular.push(format!("f{i}"));
        }
        for i in 0..cfg.n_triggers {
            regular.push(format!("t{i}"));
        }
        for k in 0..cfg.n_domains {
            for i in 0..cfg.n_triggers {
                regular.push(format!("d{k}r{i}"));
            }
        }
        Vocab::closed(&regular)
    }
}

/// Pre-training corpus for one domain: sequences of two-token chunks,
/// half random filler, half (trigger, response) pairs under the domain's
/// mapping.
pub fn domain_corpus(cfg: &RunConfig, layout: &TokenLayout, domain: usize, seed: u64) -> Vec<Vec<u32>> {
    let n_seqs = cfg.domain_tokens / cfg.seq_len;
    let mut rng = seeded_rng(mix3(seed, SALT_CORPUS, domain as u64));
    (0..n_seqs)
        .map(|_| {
            let mut seq = Vec::with_capacity(cfg.seq_len);
            for _ in 0..cfg.seq_len / 2 {
                if rng.gen::<f64>() < cfg.pair_prob {
                    let i = rng.gen_range(0..layout.n_triggers);
                    seq.push(layout.trigger(i));
                    seq.push(layout.response(domain, i));
                } else {
                    seq.push(layout.filler(rng.gen_range(0..layout.n_fillers)));
                    seq.push(layout.filler(rng.gen_range(0..layout.n_fillers)));
                }
            }
            seq
        })
        .collect()
}

/// Domain-neutral corpus (fillers only), used to seed importance with the
/// network's general knowledge before any domain training.
pub fn general_corpus(cfg: &RunConfig, layout: &TokenLayout, n_seqs: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = seeded_rng(mix2(seed, SALT_GENERAL));
    (0..n_seqs)
        .map(|_| {
            (0..cfg.seq_len)
                .map(|_| layout.filler(rng.gen_range(0..layout.n_fillers)))
                .collect()
        })
        .collect()
}

/// Binary end-task for a domain: label 1 sequences pair each trigger with
/// its own response, label 0 with the next trigger's response (a
/// derangement). Both classes have identical token marginals.
pub fn task_examples(
    cfg: &RunConfig,
    layout: &TokenLayout,
    domain: usize,
    n: usize,
    seed: u64,
) -> (Vec<Vec<u32>>, Vec<u8>) {
    let mut rng = seeded_rng(mix3(seed, domain as u64, n as u64));
    let mut seqs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = u8::from(rng.gen::<bool>());
        let mut seq = Vec::with_capacity(cfg.seq_len);
        for _ in 0..cfg.seq_len / 2 {
            let i = rng.gen_range(0..layout.n_triggers);
            let partner = if label == 1 { i } else { (i + 1) % layout.n_triggers };
            seq.push(layout.trigger(i));
            seq.push(layout.response(domain, partner));
        }
        seqs.push(seq);
        labels.push(label);
    }
    (seqs, labels)
}

/// Lower-triangular accuracy record: `acc[t][k]` is the accuracy on task
/// `k` measured after training domain `t`, for `k <= t`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    pub acc: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { acc: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.acc.len() + 1, "row must extend the triangle");
        self.acc.push(row);
    }

    /// Mean drop from each task's just-trained accuracy to its accuracy
    /// after the final domain. Positive means forgetting. Undefined (and
    /// reported as absent) with fewer than two domains.
    pub fn forgetting_rate(&self) -> Option<f64> {
        let t = self.acc.len();
        if t < 2 {
            return None;
        }
        let last = &self.acc[t - 1];
        Some((0..t - 1).map(|k| self.acc[k][k] - last[k]).sum::<f64>() / (t - 1) as f64)
    }

    /// Mean accuracy over all tasks after the final domain.
    pub fn final_avg_accuracy(&self) -> f64 {
        let last = &self.acc[self.acc.len() - 1];
        last.iter().sum::<f64>() / last.len() as f64
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    /// Macro-averaged F1, same triangular layout; recorded alongside
    /// accuracy but not used for the forgetting metric (small test sets
    /// make F1 noisy).
    pub macro_f1: AccuracyMatrix,
    /// Absent (`null`) when the run had fewer than two domains.
    pub forgetting: Option<f64>,
    pub final_avg_accuracy: f64,
    /// Mean MLM loss over each domain's final 10 steps, in domain order.
    pub domain_final_mlm: Vec<f64>,
    /// Head-importance cosine between each store contribution and the one
    /// before it (`null` where undefined, e.g. an all-zero vector). Empty
    /// for methods that never measure importance.
    pub importance_similarity_to_prev: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub per_seed: Vec<SeedResult>,
    /// Absent when any seed ran fewer than two domains.
    pub mean_forgetting: Option<f64>,
    pub mean_final_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub config: RunConfig,
    /// Keyed by method name; BTreeMap keeps serialization order stable.
    pub methods: BTreeMap<String, MethodSummary>,
}

/// Evaluate one task with a freshly trained linear probe on frozen
/// eval-mode features.
fn eval_task(
    cfg: &RunConfig,
    layout: &TokenLayout,
    model: &Model,
    domain_task: usize,
    seed: u64,
) -> Result<(f64, f64), HarnessError> {
    let (train_seqs, train_labels) =
        task_examples(cfg, layout, domain_task, cfg.task_train, mix2(seed, SALT_TASK_TRAIN));
    let (test_seqs, test_labels) =
        task_examples(cfg, layout, domain_task, cfg.task_test, mix2(seed, SALT_TASK_TEST));
    Ok(fine_tune(
        model,
        &train_seqs,
        &train_labels,
        &test_seqs,
        &test_labels,
        cfg.probe_epochs,
        cfg.probe_lr,
        mix3(seed, domain_task as u64, 0x9999),
    )?)
}

fn method_train_config(cfg: &RunConfig, method: Method) -> TrainConfig {
    let mut tc = cfg.train.clone();
    if !method.contrast_enabled() {
        tc.contrast_weight = 0.0;
    }
    tc.softmask = method.softmask_enabled();
    tc
}

/// Train one method through all domains with one seed. Each domain's
/// corpus is created inside the loop and dropped before the next domain
/// starts; nothing but the model and the importance store crosses the
/// boundary.
pub fn run_sequence(
    cfg: &RunConfig,
    method: Method,
    seed: u64,
    mut log: Option<&mut (dyn Write + 'static)>,
) -> Result<SeedResult, HarnessError> {
    cfg.validate()?;
    let layout = TokenLayout::new(cfg);
    let vocab = layout.vocab(cfg);
    let mut model = Model::new(cfg.model.clone(), vocab, mix2(seed, SALT_MODEL))?;
    let tc = method_train_config(cfg, method);

    let mut prev_imp: Option<NormalizedImportance> = None;
    let mut similarity_trace: Vec<Option<f64>> = Vec::new();
    let record_contribution =
        |prev_imp: &mut Option<NormalizedImportance>,
         trace: &mut Vec<Option<f64>>,
         imp: NormalizedImportance| {
            if let Some(prev) = prev_imp.as_ref() {
                trace.push(importance_similarity(prev, &imp).ok());
            }
            *prev_imp = Some(imp);
        };

    let mut store = if method.uses_store() {
        let mut s = ImportanceStore::zeros(&cfg.model);
        if method.initializes_from_general() {
            let general = general_corpus(cfg, &layout, cfg.importance_tokens / cfg.seq_len, seed);
            let imp = normalize_importance(&compute_importance(
                &model,
                &general,
                LossKind::ProxyKl,
                mix2(seed, SALT_IMPORTANCE),
            )?);
            s.accumulate(&imp, "general")?;
            record_contribution(&mut prev_imp, &mut similarity_trace, imp);
        } else if method == Method::RandomImportance {
            let imp = random_importance(&cfg.model, mix2(seed, SALT_IMPORTANCE));
            s.accumulate(&imp, "random-init")?;
        }
        Some(s)
    } else {
        None
    };

    let mut matrix = AccuracyMatrix::new();
    let mut f1_matrix = AccuracyMatrix::new();
    let mut domain_final_mlm = Vec::with_capacity(cfg.n_domains);
    for domain in 0..cfg.n_domains {
        {
            let corpus = domain_corpus(cfg, &layout, domain, seed);
            let stats = train_domain(
                &mut model,
                store.as_ref(),
                &corpus,
                &tc,
                mix3(seed, SALT_TRAIN, domain as u64),
                log.as_deref_mut(),
            )?;
            let tail = stats.len().saturating_sub(10);
            let tail_stats = &stats[tail..];
            domain_final_mlm.push(
                tail_stats.iter().map(|s| s.mlm_loss).sum::<f64>() / tail_stats.len().max(1) as f64,
            );
            if let Some(s) = store.as_mut() {
                let isalt = mix3(seed, SALT_IMPORTANCE, 1 + domain as u64);
                let label = format!("domain{domain}");
                if method.measures_importance() {
                    let mut sampler = seeded_rng(isalt);
                    let n_sample = cfg.importance_tokens / cfg.seq_len;
                    let sample: Vec<Vec<u32>> = (0..n_sample)
                        .map(|_| corpus[sampler.gen_range(0..corpus.len())].clone())
                        .collect();
                    let imp = normalize_importance(&compute_importance(
                        &model,
                        &sample,
                        LossKind::Mlm { mask_prob: tc.mask_prob },
                        isalt,
                    )?);
                    s.accumulate(&imp, &label)?;
                    record_contribution(&mut prev_imp, &mut similarity_trace, imp);
                } else {
                    s.accumulate(&random_importance(&cfg.model, isalt), &label)?;
                }
            }
        } // corpus dropped here; later domains cannot touch it

        let mut row = Vec::with_capacity(domain + 1);
        let mut f1_row = Vec::with_capacity(domain + 1);
        for task in 0..=domain {
            let (acc, f1) = eval_task(cfg, &layout, &model, task, seed)?;
            row.push(acc);
            f1_row.push(f1);
        }
        matrix.push_row(row);
        f1_matrix.push_row(f1_row);
    }

    let forgetting = matrix.forgetting_rate();
    let final_avg_accuracy = matrix.final_avg_accuracy();
    Ok(SeedResult {
        seed,
        accuracy: matrix,
        macro_f1: f1_matrix,
        forgetting,
        final_avg_accuracy,
        domain_final_mlm,
        importance_similarity_to_prev: similarity_trace,
    })
}

/// Run several methods over several seeds and aggregate.
pub fn run_methods(
    cfg: &RunConfig,
    methods: &[Method],
    seeds: &[u64],
    log: Option<&mut (dyn Write + 'static)>,
) -> Result<Report, HarnessError> {
    let (report, err) = run_methods_partial(cfg, methods, seeds, log);
    match err {
        None => Ok(report),
        Some(e) => Err(e),
    }
}

/// Like [`run_methods`], but on failure also returns whatever completed
/// before the error, so a partial report can still be written.
pub fn run_methods_partial(
    cfg: &RunConfig,
    methods: &[Method],
    seeds: &[u64],
    mut log: Option<&mut (dyn Write + 'static)>,
) -> (Report, Option<HarnessError>) {
    let mut out = BTreeMap::new();
    let mut failure = None;
    'outer: for &method in methods {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            log::info!("running method={} seed={seed}", method.name());
            match run_sequence(cfg, method, seed, log.as_deref_mut()) {
                Ok(r) => per_seed.push(r),
                Err(e) => {
                    failure = Some(e);
                    if !per_seed.is_empty() {
                        out.insert(method.name().to_string(), summarize(method, per_seed));
                    }
                    break 'outer;
                }
            }
        }
        out.insert(method.name().to_string(), summarize(method, per_seed));
    }
    (Report { config: cfg.clone(), methods: out }, failure)
}

fn summarize(method: Method, per_seed: Vec<SeedResult>) -> MethodSummary {
    let n = per_seed.len() as f64;
        let mean_forgetting = per_seed
            .iter()
            .map(|r| r.forgetting)
            .collect::<Option<Vec<f64>>>()
            .map(|f| f.iter().sum::<f64>() / n);
    MethodSummary {
        method: method.name().to_string(),
        mean_forgetting,
        mean_final_accuracy: per_seed.iter().map(|r| r.final_avg_accuracy).sum::<f64>() / n,
        per_seed,
    }
}

/// Write `results.json` and `results.csv` into `out_dir`. The JSON is a
/// pure function of the report (ordered maps, no timestamps), so repeated
/// identical runs produce byte-identical files.
pub fn write_report(report: &Report, out_dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(out_dir.join("results.json"), json)?;

    let mut csv = String::from("method,seed,after_domain,task,accuracy\n");
    for summary in report.methods.values() {
        for sr in &summary.per_seed {
            for (t, row) in sr.accuracy.acc.iter().enumerate() {
                for (k, a) in row.iter().enumerate() {
                    csv.push_str(&format!("{},{},{},{},{}\n", summary.method, sr.seed, t, k, a));
                }
            }
        }
    }
    std::fs::write(out_dir.join("results.csv"), csv)?;
    Ok(())
}

/// Render a compact text summary of a report (the `report` command).
pub fn format_report(report: &Report) -> String {
    let mut s = String::new();
    s.push_str("method              forgetting  final-acc  seeds\n");
    for summary in report.methods.values() {
        let forgetting = summary
            .mean_forgetting
            .map(|f| format!("{f:>10.4}"))
            .unwrap_or_else(|| format!("{:>10}", "n/a"));
        s.push_str(&format!(
            "{:<18}  {}  {:>9.4}  {}\n",
            summary.method,
            forgetting,
            summary.mean_final_accuracy,
            summary.per_seed.len()
        ));
    }
    s
}

/// Unigram distribution over the whole vocabulary.
pub fn unigram_distribution(corpus: &[Vec<u32>], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size];
    let mut total = 0.0;
    for seq in corpus {
        for &t in seq {
            counts[t as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

/// Total-variation distance between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk_scale();
        cfg.model.n_layers = 1;
        cfg.model.n_heads = 2;
        cfg.model.d_model = 16;
        cfg.model.d_ff = 24;
        cfg.model.max_seq_len = 8;
        cfg.n_domains = 2;
        cfg.n_triggers = 6;
        cfg.n_fillers = 10;
        cfg.model.vocab_size = cfg.expected_vocab();
        cfg.seq_len = 8;
        cfg.domain_tokens = 640;
        cfg.train.steps = 10;
        cfg.train.batch_size = 4;
        cfg.task_train = 24;
        cfg.task_test = 24;
        cfg.probe_epochs = 30;
        cfg.importance_tokens = 48;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let cfg = tiny_config();
        let layout = TokenLayout::new(&cfg);
        let a = domain_corpus(&cfg, &layout, 0, 5);
        let b = domain_corpus(&cfg, &layout, 0, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.domain_tokens / cfg.seq_len);
        assert!(a.iter().all(|s| s.len() == cfg.seq_len));
    }

    #[test]
    fn domains_differ_in_unigram_stats() {
        let mut cfg = tiny_config();
        // enough tokens that sampling noise is well under the thresholds
        cfg.domain_tokens = 16_000;
        let layout = TokenLayout::new(&cfg);
        let v = cfg.model.vocab_size;
        let d0 = unigram_distribution(&domain_corpus(&cfg, &layout, 0, 5), v);
        let d1 = unigram_distribution(&domain_corpus(&cfg, &layout, 1, 5), v);
        // different seeds of the same domain are near-identical ...
        let d0b = unigram_distribution(&domain_corpus(&cfg, &layout, 0, 6), v);
        assert!(tv_distance(&d0, &d0b) < 0.05);
        // ... while different domains use disjoint response tokens
        assert!(tv_distance(&d0, &d1) > 0.2);
    }

    #[test]
    fn task_classes_share_token_marginals() {
        let cfg = tiny_config();
        let layout = TokenLayout::new(&cfg);
        let (seqs, labels) = task_examples(&cfg, &layout, 0, 2000, 3);
        let v = cfg.model.vocab_size;
        let pos: Vec<Vec<u32>> = seqs
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 1)
            .map(|(s, _)| s.clone())
            .collect();
        let neg: Vec<Vec<u32>> = seqs
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == 0)
            .map(|(s, _)| s.clone())
            .collect();
        let dp = unigram_distribution(&pos, v);
        let dn = unigram_distribution(&neg, v);
        assert!(tv_distance(&dp, &dn) < 0.05, "classes should differ only in pairing");
    }

    #[test]
    fn forgetting_rate_hand_case() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]);
        m.push_row(vec![0.7, 0.85]);
        m.push_row(vec![0.6, 0.75, 0.8]);
        // ((0.9-0.6) + (0.85-0.75)) / 2 = 0.2
        assert!((m.forgetting_rate().unwrap() - 0.2).abs() < 1e-12);
        assert!((m.final_avg_accuracy() - (0.6 + 0.75 + 0.8) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn forgetting_absent_below_two_domains() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]);
        assert_eq!(m.forgetting_rate(), None);

        let mut cfg = tiny_config();
        cfg.n_domains = 1;
        cfg.model.vocab_size = cfg.expected_vocab();
        cfg.validate().unwrap();
        let r = run_sequence(&cfg, Method::Das, 11, None).unwrap();
        assert_eq!(r.forgetting, None);
        assert_eq!(r.accuracy.acc.len(), 1);
        // the JSON report writes the absent value as an explicit null
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["forgetting"].is_null());
    }

    #[test]
    fn forgetting_rate_is_antisymmetric() {
        // swapping each diagonal entry with the final-row entry negates
        // the rate
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9]);
        m.push_row(vec![0.7, 0.85]);
        m.push_row(vec![0.6, 0.75, 0.8]);
        let mut swapped = m.clone();
        for k in 0..2 {
            let diag = m.acc[k][k];
            let fin = m.acc[2][k];
            swapped.acc[k][k] = fin;
            swapped.acc[2][k] = diag;
        }
        let f = m.forgetting_rate().unwrap();
        let g = swapped.forgetting_rate().unwrap();
        assert!((f + g).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_and_csv_counts_triangle() {
        let cfg = tiny_config();
        let report = run_methods(&cfg, &[Method::Ncl], &[1u64], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();

        let loaded: Report = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("results.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(loaded, report);
        assert_eq!(loaded.methods["ncl"].per_seed[0].accuracy, report.methods["ncl"].per_seed[0].accuracy);

        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let rows = csv.lines().count() - 1; // header
        let t = cfg.n_domains;
        assert_eq!(rows, t * (t + 1) / 2, "one CSV row per lower-triangle cell");
    }

    #[test]
    #[should_panic(expected = "row must extend the triangle")]
    fn matrix_rejects_bad_row() {
        let mut m = AccuracyMatrix::new();
        m.push_row(vec![0.9, 0.1]);
    }

    #[test]
    fn run_sequence_is_deterministic() {
        let cfg = tiny_config();
        let a = run_sequence(&cfg, Method::Das, 11, None).unwrap();
        let b = run_sequence(&cfg, Method::Das, 11, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.accuracy.acc.len(), cfg.n_domains);
    }

    #[test]
    fn report_files_are_byte_identical_across_runs() {
        let cfg = tiny_config();
        let methods = [Method::Ncl];
        let seeds = [1u64];
        let r1 = run_methods(&cfg, &methods, &seeds, None).unwrap();
        let r2 = run_methods(&cfg, &methods, &seeds, None).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(&r1, d1.path()).unwrap();
        write_report(&r2, d2.path()).unwrap();
        let j1 = std::fs::read(d1.path().join("results.json")).unwrap();
        let j2 = std::fs::read(d2.path().join("results.json")).unwrap();
        assert_eq!(j1, j2);
        let c1 = std::fs::read(d1.path().join("results.csv")).unwrap();
        let c2 = std::fs::read(d2.path().join("results.csv")).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn methods_produce_distinct_runs() {
        let cfg = tiny_config();
        let das = run_sequence(&cfg, Method::Das, 3, None).unwrap();
        let ncl = run_sequence(&cfg, Method::Ncl, 3, None).unwrap();
        let woc = run_sequence(&cfg, Method::WoContrast, 3, None).unwrap();
        // same data and model init, but the training dynamics differ
        assert!(das != ncl || das != woc);
    }
}
