//! Fusion ablation: full model, concatenation fusion and the relative-pose head,
//! trained from one shared stage-1 model per seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use lanpose_core::metrics::{recall_table, write_predictions, MetricsReport, RecallRow};
use lanpose_core::scene::DatasetRecord;
use lanpose_net::checkpoint::{copy_prefix, Checkpoint};
use lanpose_net::model::{FusionVariant, Network};
use lanpose_net::predict::predict;
use lanpose_net::train::{train, train_resume, TrainConfig, DIRECT_PREFIX};
use lanpose_net::NetError;

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: FusionVariant,
    pub per_seed: Vec<SeedResult>,
    /// Assembly-pose mean row averaged over seeds.
    pub assembly: RecallRow,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Stage-1 wall time per seed.
    pub stage1_time: Vec<Duration>,
}

pub fn variant_title(v: FusionVariant) -> &'static str {
    match v {
        FusionVariant::CrossAttention => "full (cross-attention)",
        FusionVariant::Concat => "w/o cross-attention",
        FusionVariant::Relative => "P -> dP",
    }
}

fn average(rows: &[&RecallRow], label: &str) -> RecallRow {
    let k = rows.len().max(1) as f64;
    let mut out = RecallRow { label: label.to_string(), n: 0, add: [0.0; 3], deg_cm: [0.0; 2] };
    for r in rows {
        out.n += r.n;
        for i in 0..3 {
            out.add[i] += r.add[i] / k;
        }
        for i in 0..2 {
            out.deg_cm[i] += r.deg_cm[i] / k;
        }
    }
    out
}

/// Trains stage 1 once per seed, then stage 2 for every variant on top of it,
/// and scores each on `val`. Artifacts go to `out_dir/seed<s>/<variant>/`.
pub fn ablate(
    train_recs: &[DatasetRecord],
    val: &[DatasetRecord],
    cfg: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationReport, NetError> {
    let mut results: Vec<Vec<SeedResult>> = vec![Vec::new(); FusionVariant::ALL.len()];
    let mut stage1_time = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seed_dir = out_dir.join(format!("seed{seed}"));
        let mut s1 = cfg.clone();
        s1.seed = seed;
        s1.epochs_stage2 = 0;
        s1.model.variant = FusionVariant::CrossAttention;
        log::info!("seed {seed}: stage 1");
        let t = Instant::now();
        let stage1 = train(train_recs, val, &s1, &seed_dir.join("stage1"))?.network;
        stage1_time.push(t.elapsed());
        for (vi, variant) in FusionVariant::ALL.into_iter().enumerate() {
            let mut vcfg = cfg.clone();
            vcfg.seed = seed;
            vcfg.model.variant = variant;
            let mut net = Network::new(vcfg.model.clone(), seed)?;
            copy_prefix(&mut net.params, &stage1.params, DIRECT_PREFIX)?;
            let dir = seed_dir.join(variant.label());
            log::info!("seed {seed}: stage 2, {}", variant.label());
            let out = train_resume(train_recs, val, &vcfg, &dir, Some(Checkpoint::new(net, 2, 0, None)))?;
            let preds = predict(&out.network, val, &cfg.noise)?;
            write_predictions(fs::File::create(dir.join("predictions.jsonl"))?, &preds)
                .map_err(|e| NetError::Checkpoint(e.to_string()))?;
            let report = recall_table(val, &preds).map_err(|e| NetError::Checkpoint(e.to_string()))?;
            fs::write(dir.join("report.csv"), report.to_csv())?;
            results[vi].push(SeedResult { seed, report });
        }
    }
    let rows = FusionVariant::ALL
        .into_iter()
        .zip(results)
        .map(|(variant, per_seed)| {
            let means: Vec<&RecallRow> = per_seed.iter().map(|s| &s.report.assembly.mean).collect();
            let assembly = average(&means, variant.label());
            AblationRow { variant, per_seed, assembly }
        })
        .collect();
    Ok(AblationReport { rows, stage1_time })
}

const CSV_HEADER: &str = "variant,seed,add_0.02d,add_0.05d,add_0.1d,2deg2cm,5deg5cm";

impl AblationReport {
    pub fn row(&self, v: FusionVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Per-seed and seed-averaged assembly-pose means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let line = |s: &mut String, v: &str, seed: &str, r: &RecallRow| {
            let _ = writeln!(
                s,
                "{v},{seed},{:.2},{:.2},{:.2},{:.2},{:.2}",
                r.add[0], r.add[1], r.add[2], r.deg_cm[0], r.deg_cm[1]
            );
        };
        for row in &self.rows {
            for sr in &row.per_seed {
                line(&mut s, row.variant.label(), &sr.seed.to_string(), &sr.report.assembly.mean);
            }
            line(&mut s, row.variant.label(), "mean", &row.assembly);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let seeds = self.rows.first().map_or(0, |r| r.per_seed.len());
        let _ = writeln!(s, "6D assembly pose, mean over {seeds} seed(s)");
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "variant", "0.02d", "0.05d", "0.1d", "2°2cm", "5°5cm"
        );
        for row in &self.rows {
            let r = &row.assembly;
            let _ = writeln!(
                s,
                "{:<24} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                variant_title(row.variant),
                r.add[0],
                r.add[1],
                r.add[2],
                r.deg_cm[0],
                r.deg_cm[1]
            );
        }
        s
    }
}
